use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{Demographics, SignalSegment};

pub const UPPER_LEN: usize = 21;

/// Pearson correlation between chest leads V1..V6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix(pub [[f64; 6]; 6]);

impl AffinityMatrix {
    pub fn identity() -> Self {
        let mut a = [[0.0; 6]; 6];
        (0..6).for_each(|i| a[i][i] = 1.0);
        Self(a)
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        let mut s = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                s += (self.0[i][j] - other.0[i][j]).powi(2);
            }
        }
        s.sqrt()
    }
}

/// Pearson correlations of six equally long channels.
pub fn pearson_matrix(chest: &[Vec<f64>]) -> Result<AffinityMatrix> {
    if chest.len() != 6 {
        return Err(Error::ShapeMismatch { expected: "6 chest leads".into(), got: chest.len().to_string() });
    }
    let n = chest[0].len();
    if n < 2 || chest.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("chest leads must share a length of at least 2"));
    }
    let centred: Vec<Vec<f64>> = chest
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for (k, &s) in norms.iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::DegenerateChannel { channel: format!("V{}", k + 1) });
        }
    }
    let mut a = [[0.0; 6]; 6];
    for i in 0..6 {
        a[i][i] = 1.0;
        for j in i + 1..6 {
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(x, y)| x * y).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            a[i][j] = r;
            a[j][i] = r;
        }
    }
    Ok(AffinityMatrix(a))
}

/// Affinity of a 6-lead chest segment or of the chest part of a 12-lead one.
pub fn affinity_matrix(segment: &SignalSegment) -> Result<AffinityMatrix> {
    let chest = if segment.channels() == 12 { segment.chest()? } else { segment.clone() };
    pearson_matrix(&chest.samples)
}

/// Row-major upper triangle including the diagonal.
pub fn flatten_upper(a: &AffinityMatrix) -> [f64; UPPER_LEN] {
    let mut out = [0.0; UPPER_LEN];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            out[k] = a.0[i][j];
            k += 1;
        }
    }
    out
}

/// Inverse of [`flatten_upper`] for symmetric matrices.
#[allow(clippy::needless_range_loop)]
pub fn reshape_upper(v: &[f64]) -> Result<AffinityMatrix> {
    if v.len() < UPPER_LEN {
        return Err(Error::ShapeMismatch { expected: UPPER_LEN.to_string(), got: v.len().to_string() });
    }
    let mut a = [[0.0; 6]; 6];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            a[i][j] = v[k];
            a[j][i] = v[k];
            k += 1;
        }
    }
    Ok(AffinityMatrix(a))
}

/// `[a ‖ d]`.
pub fn joint_feature(a: &[f64], d: &[f64], p: usize) -> Result<Vec<f64>> {
    if a.len() != UPPER_LEN || d.len() != p {
        return Err(Error::ShapeMismatch {
            expected: format!("{UPPER_LEN} + {p}"),
            got: format!("{} + {}", a.len(), d.len()),
        });
    }
    Ok(a.iter().chain(d).copied().collect())
}

/// Joint feature of a subject: mean upper triangle over its segments, then
/// its demographics.
pub fn subject_feature(segments: &[&SignalSegment], demographics: &Demographics) -> Result<Vec<f64>> {
    if segments.is_empty() {
        return Err(Error::invalid("subject without segments"));
    }
    let mut mean = [0.0; UPPER_LEN];
    for s in segments {
        for (m, v) in mean.iter_mut().zip(flatten_upper(&affinity_matrix(s)?)) {
            *m += v / segments.len() as f64;
        }
    }
    let d = demographics.to_vec();
    joint_feature(&mean, &d, d.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chest(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identical_and_opposite_leads() {
        let base: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let a = pearson_matrix(&vec![base.clone(); 6]).unwrap();
        assert!(a.0.iter().flatten().all(|v| (v - 1.0).abs() < 1e-12));
        let mut chest = random_chest(2, 50);
        chest[1] = chest[0].iter().map(|v| -v).collect();
        let a = pearson_matrix(&chest).unwrap();
        assert!((a.0[0][1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_covariance_oracle() {
        let chest = random_chest(3, 250);
        let a = pearson_matrix(&chest).unwrap();
        let n = 250.0;
        let mean = |x: &[f64]| x.iter().sum::<f64>() / n;
        let cov = |x: &[f64], y: &[f64]| {
            let (mx, my) = (mean(x), mean(y));
            x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
        };
        for i in 0..6 {
            for j in 0..6 {
                let r = cov(&chest[i], &chest[j]) / (cov(&chest[i], &chest[i]) * cov(&chest[j], &chest[j])).sqrt();
                assert!((a.0[i][j] - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_lead_fails() {
        let mut chest = random_chest(4, 20);
        chest[3] = vec![1.0; 20];
        assert!(matches!(pearson_matrix(&chest), Err(Error::DegenerateChannel { .. })));
    }

    #[test]
    fn flatten_layout() {
        let v = flatten_upper(&AffinityMatrix::identity());
        let ones: Vec<usize> = (0..21).filter(|&k| v[k] == 1.0).collect();
        assert_eq!(ones, vec![0, 6, 11, 15, 18, 20]);
        assert!(flatten_upper(&AffinityMatrix([[1.0; 6]; 6])).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn joint_layout() {
        let a = [0.5; 21];
        let j = joint_feature(&a, &[0.0; 3], 3).unwrap();
        assert_eq!(j.len(), 24);
        assert_eq!(&j[..21], &a[..]);
        assert!(j[21..].iter().all(|&v| v == 0.0));
        assert!(joint_feature(&a, &[0.0; 2], 3).is_err());
    }
}
