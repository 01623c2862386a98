//! Lead-difference, spectral, axis and alignment losses on channel-major
//! 12-lead arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrs::detect_r_peaks;
use crate::signals::{LEAD_I, LEAD_II};
use crate::spectral::dft_real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lead: f64,
    pub freq: f64,
    pub axis: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lead: 1.0, freq: 0.5, axis: 0.2, align: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub lead: f64,
    pub freq: f64,
    pub axis: f64,
    pub align: f64,
}

fn check_pair(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<usize> {
    let n = gt.first().map_or(0, Vec::len);
    if pred.len() != gt.len() || pred.iter().chain(gt).any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} leads of {n}", gt.len()),
            got: format!("{} leads of {}", pred.len(), pred.first().map_or(0, Vec::len)),
        });
    }
    Ok(n)
}

/// `Σ_{i≠j} ‖(pred_i − pred_j) − (gt_i − gt_j)‖₂`.
pub fn loss_lead(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    let d: Vec<Vec<f64>> = pred.iter().zip(gt).map(|(p, g)| p.iter().zip(g).map(|(a, b)| a - b).collect()).collect();
    let mut s = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            if i != j {
                s += d[i].iter().zip(&d[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
        }
    }
    Ok(s)
}

/// Complex Frobenius norm of `dft(gt) − dft(pred)`.
pub fn loss_freq(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (fp, fg) = (dft_real(p), dft_real(g));
        s += fp.iter().zip(&fg).map(|(a, b)| (b - a).norm_sqr()).sum::<f64>();
    }
    Ok(s.sqrt())
}

/// `(cos θ, sin θ)` with `θ = atan2(Σ II, Σ I)`, or `None` when both sums
/// vanish.
pub fn axis_unit(ecg: &[Vec<f64>]) -> Option<[f64; 2]> {
    let s1: f64 = ecg.get(LEAD_I)?.iter().sum();
    let s2: f64 = ecg.get(LEAD_II)?.iter().sum();
    let r = s1.hypot(s2);
    (r > 0.0).then(|| [s1 / r, s2 / r])
}

/// Chord length between the two axis unit vectors, in `[0, 2]`.
pub fn loss_axis(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    match (axis_unit(pred), axis_unit(gt)) {
        (Some(a), Some(b)) => Ok((a[0] - b[0]).hypot(a[1] - b[1])),
        _ => {
            log::warn!("electrical axis undefined (lead I and II sums are zero); axis loss set to 0");
            Ok(0.0)
        }
    }
}

fn mean_range(x: &[Vec<f64>]) -> f64 {
    let r: f64 = x
        .iter()
        .map(|c| {
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .sum();
    r / x.len() as f64
}

/// Peak timing (lead II, seconds over the common beats), mean
/// peak-to-peak range and beat count differences, summed.
pub fn loss_align(gen: &[Vec<f64>], gt: &[Vec<f64>], rate: f64) -> Result<f64> {
    check_pair(gen, gt)?;
    if gen.len() <= LEAD_II {
        return Err(Error::invalid("alignment loss needs lead II"));
    }
    let pg = detect_r_peaks(&gen[LEAD_II], rate)?;
    let pt = detect_r_peaks(&gt[LEAD_II], rate)?;
    let common = pg.len().min(pt.len());
    let timing = if common == 0 {
        log::warn!("no R peaks in generated or reference lead II; timing term skipped");
        0.0
    } else {
        pg.iter().zip(&pt).map(|(&a, &b)| a.abs_diff(b) as f64 / rate).sum::<f64>() / common as f64
    };
    let amplitude = (mean_range(gen) - mean_range(gt)).abs();
    let count = pg.len().abs_diff(pt.len()) as f64;
    Ok(timing + amplitude + count)
}

pub fn loss_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lead * c.lead + w.freq * c.freq + w.axis * c.axis + w.align * c.align
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::synth::{synth_cohort, CohortSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_leads(seed: u64, leads: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..leads).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn lead_loss_identities_and_oracle() {
        let gt = random_leads(1, 12, 16);
        assert_eq!(loss_lead(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = gt.iter().map(|c| c.iter().map(|v| v + 0.7).collect()).collect();
        assert!(loss_lead(&shifted, &gt).unwrap() < 1e-12);

        let pred = random_leads(2, 12, 16);
        let mut want = 0.0;
        let mut pairs = 0;
        for i in 0..12 {
            for j in 0..12 {
                if i == j {
                    continue;
                }
                pairs += 1;
                let mut s = 0.0;
                for n in 0..16 {
                    let d = (pred[i][n] - pred[j][n]) - (gt[i][n] - gt[j][n]);
                    s += d * d;
                }
                want += s.sqrt();
            }
        }
        assert_eq!(pairs, 132);
        assert!((loss_lead(&pred, &gt).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn freq_loss_parseval_and_naive_dft() {
        let gt = random_leads(3, 12, 20);
        let pred = random_leads(4, 12, 20);
        assert_eq!(loss_freq(&gt, &gt).unwrap(), 0.0);
        let time: f64 = pred.iter().flatten().zip(gt.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let f = loss_freq(&pred, &gt).unwrap();
        assert!((f - time).abs() < 1e-9);

        let n = 20;
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            for k in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for (m, (a, b)) in p.iter().zip(g).enumerate() {
                    let ang = -2.0 * PI * (k * m) as f64 / n as f64;
                    re += (b - a) * ang.cos();
                    im += (b - a) * ang.sin();
                }
                s += (re * re + im * im) / n as f64;
            }
        }
        assert!((f - s.sqrt()).abs() < 1e-9);
    }

    fn with_axis(theta_deg: f64) -> Vec<Vec<f64>> {
        let t = theta_deg.to_radians();
        let mut leads = vec![vec![0.0; 4]; 12];
        leads[LEAD_I] = vec![t.cos(); 4];
        leads[LEAD_II] = vec![t.sin(); 4];
        leads
    }

    #[test]
    fn axis_loss_geometry() {
        let a = with_axis(0.0);
        assert_eq!(loss_axis(&a, &a).unwrap(), 0.0);
        assert!((loss_axis(&with_axis(180.0), &a).unwrap() - 2.0).abs() < 1e-12);
        assert!((loss_axis(&with_axis(90.0), &a).unwrap() - 2f64.sqrt()).abs() < 1e-9);
        let zero = vec![vec![0.0; 4]; 12];
        assert_eq!(loss_axis(&zero, &a).unwrap(), 0.0);
    }

    fn ecg_window() -> Vec<Vec<f64>> {
        let spec = CohortSpec { segments_per_subject: 1, ..CohortSpec::default() };
        synth_cohort(&spec, 11).unwrap().swap_remove(0).ecg.samples
    }

    #[test]
    fn alignment_loss_cases() {
        let gt = ecg_window();
        assert_eq!(loss_align(&gt, &gt, 125.0).unwrap(), 0.0);

        let shifted: Vec<Vec<f64>> = gt
            .iter()
            .map(|c| {
                let mut v = c.clone();
                v.rotate_right(4);
                v
            })
            .collect();
        let pg = detect_r_peaks(&shifted[LEAD_II], 125.0).unwrap();
        let pt = detect_r_peaks(&gt[LEAD_II], 125.0).unwrap();
        assert_eq!(pg.len(), pt.len());
        assert!((loss_align(&shifted, &gt, 125.0).unwrap() - 4.0 / 125.0).abs() < 1e-12);

        let doubled: Vec<Vec<f64>> = gt.iter().map(|c| c.iter().map(|v| 2.0 * v).collect()).collect();
        let e_t = mean_range(&gt);
        assert!((loss_align(&doubled, &gt, 125.0).unwrap() - e_t).abs() < 1e-9);
    }

    #[test]
    fn total_uses_default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lead, w.freq, w.axis, w.align), (1.0, 0.5, 0.2, 0.3));
        assert_eq!(loss_total(&LossComponents::default(), &w), 0.0);
        let ones = LossComponents { lead: 1.0, freq: 1.0, axis: 1.0, align: 1.0 };
        assert!((loss_total(&ones, &w) - 2.0).abs() < 1e-15);
    }
}
