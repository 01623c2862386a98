use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension z-score. Dimensions without spread keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("no rows to fit"))?;
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows differ in length"));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean silhouette with Euclidean distance; singletons score 0.
pub fn silhouette(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::invalid("features and labels must be non-empty and equally long"));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("empty cluster in labels"));
    }
    let n = features.len();
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(&features[i], &features[j]).sqrt();
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
}

fn assign_nearest(x: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let labels = x
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, dist2(p, m)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            sse += d;
            best
        })
        .collect();
    (labels, sse)
}

fn member_means(x: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let d = x[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in x.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Lloyd iterations from k-means++ seeds.
pub fn lloyd(x: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> Partition {
    let n = x.len();
    let mut centroids = vec![x[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = x
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(x[next].clone());
    }
    let (mut labels, mut sse) = assign_nearest(x, &centroids);
    for _ in 0..max_iter {
        let means = member_means(x, &labels, k);
        for (c, m) in means.into_iter().enumerate() {
            match m {
                Some(m) => centroids[c] = m,
                None => {
                    // Re-seed an empty cluster from the worst-fitted point.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            dist2(&x[a], &centroids[labels[a]])
                                .total_cmp(&dist2(&x[b], &centroids[labels[b]]))
                                .then(b.cmp(&a))
                        })
                        .unwrap();
                    centroids[c] = x[far].clone();
                }
            }
        }
        let (new_labels, new_sse) = assign_nearest(x, &centroids);
        let done = new_labels == labels;
        labels = new_labels;
        sse = new_sse;
        if done {
            break;
        }
    }
    let means = member_means(x, &labels, k);
    for (c, m) in means.into_iter().enumerate() {
        if let Some(m) = m {
            centroids[c] = m;
        }
    }
    Partition { labels, centroids, sse }
}

/// Best-SSE partition over `restarts` seeded runs.
pub fn kmeans(x: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Partition> {
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!("cannot form {k} clusters from {} points", x.len())));
    }
    let mut best: Option<Partition> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let p = lloyd(x, k, &mut rng, 300);
        let distinct = {
            let mut seen = vec![false; k];
            p.labels.iter().for_each(|&l| seen[l] = true);
            seen.iter().all(|&s| s)
        };
        if !distinct {
            continue;
        }
        if best.as_ref().is_none_or(|b| p.sse < b.sse) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::DegenerateGeometry(format!("no non-empty {k}-partition found")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_min: 2, k_max: 10, restarts: 20 }
    }
}

/// Fitted partition of joint features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Centroids in raw joint-feature units (mean of members).
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub scaler: Scaler,
}

impl ClusterModel {
    pub fn standardized_centroids(&self) -> Vec<Vec<f64>> {
        self.centroids.iter().map(|c| self.scaler.transform(c)).collect()
    }

    /// Nearest centroid in standardized space; ties go to the lower index.
    pub fn nearest(&self, feature: &[f64]) -> usize {
        let z = self.scaler.transform(feature);
        let (labels, _) = assign_nearest(&[z], &self.standardized_centroids());
        labels[0]
    }
}

/// Runs k-means for every K in range on standardized features and keeps the
/// K with the highest silhouette.
pub fn fit_clusters(features: &[Vec<f64>], cfg: &ClusterConfig, seed: u64) -> Result<ClusterModel> {
    if cfg.k_min < 2 || cfg.k_max < cfg.k_min {
        return Err(Error::invalid(format!("invalid K range {}..={}", cfg.k_min, cfg.k_max)));
    }
    if features.len() < cfg.k_max + 1 {
        return Err(Error::invalid(format!(
            "need at least {} subjects for K up to {}, got {}",
            cfg.k_max + 1,
            cfg.k_max,
            features.len()
        )));
    }
    let first = &features[0];
    if features.iter().all(|f| f == first) {
        return Err(Error::DegenerateGeometry("all joint features are identical".into()));
    }
    let scaler = Scaler::fit(features)?;
    let z: Vec<Vec<f64>> = features.iter().map(|f| scaler.transform(f)).collect();

    let mut silhouette_by_k = BTreeMap::new();
    let mut best: Option<(usize, f64, Partition)> = None;
    for k in cfg.k_min..=cfg.k_max {
        let Ok(p) = kmeans(&z, k, cfg.restarts, seed.wrapping_add(k as u64)) else {
            log::warn!("K={k}: no valid partition");
            continue;
        };
        let s = silhouette(&z, &p.labels)?;
        silhouette_by_k.insert(k, s);
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((k, s, p));
        }
    }
    let (k, _, p) = best.ok_or_else(|| Error::DegenerateGeometry("no K produced a partition".into()))?;
    let centroids = member_means(features, &p.labels, k).into_iter().map(Option::unwrap).collect();
    Ok(ClusterModel { k, centroids, labels: p.labels, silhouette_by_k, scaler })
}

/// Fraction of points whose label matches the truth under the best
/// one-to-one relabeling (exhaustive for small K).
pub fn permutation_accuracy(labels: &[usize], truth: &[usize]) -> f64 {
    let k = labels.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits = labels.iter().zip(truth).filter(|(l, t)| p[**l] == **t).count();
        best = best.max(hits);
    });
    best as f64 / labels.len().max(1) as f64
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}
