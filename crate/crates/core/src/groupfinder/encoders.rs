use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::optim::{Optimizer, OptimizerKind};
use crate::model::tape::{log_sum_exp, Tape, Var};
use crate::model::ParamStore;

use super::affinity::{reshape_upper, AffinityMatrix};
use super::cluster::{ClusterModel, Scaler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: 32, embed_dim: 16, tau: 0.1, epochs: 300, lr: 0.01 }
    }
}

/// Both encoder branches plus the PPG feature scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub store: ParamStore,
    pub ppg_scaler: Scaler,
    pub tau: f64,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHistory {
    pub losses: Vec<f64>,
}

/// `−log softmax(z·c/τ)[k_true]`.
pub fn contrastive_loss(z: &[f64], k_true: usize, centroids: &[Vec<f64>], tau: f64) -> f64 {
    let logits: Vec<f64> = centroids
        .iter()
        .map(|c| z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    log_sum_exp(&logits) - logits[k_true]
}

fn init_mlp(store: &mut ParamStore, prefix: &str, dims: [usize; 3], rng: &mut ChaCha8Rng) {
    for (l, (i, o)) in [(dims[0], dims[1]), (dims[1], dims[2])].into_iter().enumerate() {
        let sd = (1.0 / i as f64).sqrt();
        let w = (0..i * o).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        store.add(&format!("{prefix}.w{l}"), i, o, w, true);
        store.add(&format!("{prefix}.b{l}"), 1, o, vec![0.0; o], true);
    }
}

fn mlp(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let id = |n: &str| store.id(&format!("{prefix}.{n}")).expect("encoder parameter");
    let w0 = tape.param(store, id("w0"));
    let b0 = tape.param(store, id("b0"));
    let w1 = tape.param(store, id("w1"));
    let b1 = tape.param(store, id("b1"));
    let h = tape.matmul(x, w0);
    let h = tape.add_row(h, b0);
    let h = tape.tanh(h);
    let o = tape.matmul(h, w1);
    tape.add_row(o, b1)
}

impl EncoderParams {
    pub fn init(affinity_dim: usize, ppg_scaler: Scaler, cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_mlp(&mut store, "ppg", [ppg_scaler.dim(), cfg.hidden, cfg.embed_dim], &mut rng);
        init_mlp(&mut store, "affinity", [affinity_dim, cfg.hidden, cfg.embed_dim], &mut rng);
        Self { store, ppg_scaler, tau: cfg.tau, embed_dim: cfg.embed_dim }
    }

    /// Unnormalized PPG embedding.
    pub fn embed_ppg(&self, features: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.leaf(1, features.len(), self.ppg_scaler.transform(features));
        let z = mlp(&mut t, &self.store, "ppg", x);
        t.value(z).to_vec()
    }

    /// Unit-norm embeddings of the standardized cluster centroids.
    pub fn embed_centroids(&self, clusters: &ClusterModel) -> Vec<Vec<f64>> {
        let z = clusters.standardized_centroids();
        let d = z[0].len();
        let mut t = Tape::new();
        let x = t.leaf(z.len(), d, z.concat());
        let e = mlp(&mut t, &self.store, "affinity", x);
        let e = t.normalize_rows(e);
        t.value(e).chunks(self.embed_dim).map(<[f64]>::to_vec).collect()
    }

    /// Mean contrastive loss over a batch, recorded on `tape`.
    fn batch_loss(&self, tape: &mut Tape, ppg: &[[f64; 3]], labels: &[usize], clusters: &ClusterModel) -> Var {
        let xs: Vec<f64> = ppg.iter().flat_map(|f| self.ppg_scaler.transform(f)).collect();
        let x = tape.leaf(ppg.len(), 3, xs);
        let z = mlp(tape, &self.store, "ppg", x);
        let z = tape.normalize_rows(z);
        let cz = clusters.standardized_centroids();
        let c = tape.leaf(cz.len(), cz[0].len(), cz.concat());
        let e = mlp(tape, &self.store, "affinity", c);
        let e = tape.normalize_rows(e);
        let et = tape.transpose(e);
        let logits = tape.matmul(z, et);
        let logits = tape.scale(logits, 1.0 / self.tau);
        tape.cross_entropy_rows(logits, labels)
    }

    pub fn loss(&self, ppg: &[[f64; 3]], labels: &[usize], clusters: &ClusterModel) -> f64 {
        let mut t = Tape::new();
        let l = self.batch_loss(&mut t, ppg, labels, clusters);
        t.scalar(l)
    }
}

/// Full-batch training of both branches on (PPG features, cluster label)
/// pairs.
pub fn train_encoders(
    ppg: &[[f64; 3]],
    labels: &[usize],
    clusters: &ClusterModel,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<(EncoderParams, EncoderHistory)> {
    if ppg.is_empty() || ppg.len() != labels.len() {
        return Err(Error::invalid("need one label per PPG feature row"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= clusters.k) {
        return Err(Error::invalid(format!("label {l} outside 0..{}", clusters.k)));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let rows: Vec<Vec<f64>> = ppg.iter().map(|f| f.to_vec()).collect();
    let scaler = Scaler::fit(&rows)?;
    let mut params = EncoderParams::init(clusters.scaler.dim(), scaler, cfg, seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr, params.store.len());
    let mask = params.store.trainable_mask();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let mut last_finite = params.store.values().to_vec();
    for epoch in 0..cfg.epochs {
        let mut t = Tape::new();
        let l = params.batch_loss(&mut t, ppg, labels, clusters);
        let loss = t.scalar(l);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, last_finite });
        }
        losses.push(loss);
        last_finite.copy_from_slice(params.store.values());
        let g = t.backward(l);
        let mut flat = vec![0.0; params.store.len()];
        t.param_grads(&g, &params.store, &mut flat);
        opt.step(params.store.values_mut(), &flat, &mask);
    }
    let final_loss = params.loss(ppg, labels, clusters);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs, last_finite });
    }
    losses.push(final_loss);
    log::info!("encoder training: loss {:.4} -> {:.4}", losses[0], final_loss);
    Ok((params, EncoderHistory { losses }))
}

/// Result of contrastive group assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub k: usize,
    pub affinity: AffinityMatrix,
    pub similarities: Vec<f64>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Picks the centroid whose embedding is most cosine-similar to `z`.
pub fn assign_embedding(z: &[f64], embedded: &[Vec<f64>], clusters: &ClusterModel) -> Result<Assignment> {
    let similarities: Vec<f64> = embedded.iter().map(|c| cosine(z, c)).collect();
    let k = argmax_first(&similarities);
    Ok(Assignment { k, affinity: reshape_upper(&clusters.centroids[k])?, similarities })
}

/// Assigns a PPG feature vector to a cluster.
pub fn assign_features(features: &[f64; 3], enc: &EncoderParams, clusters: &ClusterModel) -> Result<Assignment> {
    let z = enc.embed_ppg(features);
    assign_embedding(&z, &enc.embed_centroids(clusters), clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy_clusters() -> ClusterModel {
        let centroids = vec![vec![0.0; 22], vec![1.0; 22], vec![-1.0; 22]];
        ClusterModel {
            k: 3,
            scaler: Scaler { mean: vec![0.0; 22], scale: vec![1.0; 22] },
            centroids,
            labels: vec![],
            silhouette_by_k: BTreeMap::new(),
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let c = vec![vec![0.0; 4]; 7];
        assert!((contrastive_loss(&[1.0, 2.0, 3.0, 4.0], 3, &c, 0.1) - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_decreases_in_true_logit() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut prev = f64::INFINITY;
        for s in [0.0, 1.0, 5.0, 50.0] {
            let l = contrastive_loss(&[s, 0.0], 0, &c, 0.5);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = c.iter().map(|ci| ci.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / 0.1).collect();
        let oracle = logits.iter().map(|l| l.exp()).sum::<f64>().ln() - logits[2];
        assert!((contrastive_loss(&z, 2, &c, 0.1) - oracle).abs() < 1e-9);
    }

    #[test]
    fn assignment_ties_and_exact_match() {
        let clusters = toy_clusters();
        let embedded = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(assign_embedding(&[0.0, 2.0], &embedded, &clusters).unwrap().k, 1);
        let tied = vec![vec![1.0, 0.0]; 3];
        assert_eq!(assign_embedding(&[0.3, 0.1], &tied, &clusters).unwrap().k, 0);
        let a = assign_embedding(&[0.0, 1.0], &embedded, &clusters).unwrap();
        assert!((a.similarities[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_zero_epochs_is_init() {
        let clusters = toy_clusters();
        let ppg: Vec<[f64; 3]> = (0..30).map(|i| [1.0, 0.1 + 0.1 * (i % 3) as f64, -3.0 + 0.01 * i as f64]).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = EncoderConfig { epochs: 0, ..Default::default() };
        let (p0, h0) = train_encoders(&ppg, &labels, &clusters, &cfg, 1).unwrap();
        let scaler = p0.ppg_scaler.clone();
        assert_eq!(p0, EncoderParams::init(22, scaler, &cfg, 1));
        assert_eq!(h0.losses.len(), 1);
        let cfg = EncoderConfig { epochs: 150, ..Default::default() };
        let (p, h) = train_encoders(&ppg, &labels, &clusters, &cfg, 1).unwrap();
        assert!(h.losses.last().unwrap() < &h.losses[0]);
        let hits = ppg
            .iter()
            .zip(&labels)
            .filter(|(f, &l)| assign_features(f, &p, &clusters).unwrap().k == l)
            .count();
        assert_eq!(hits, 30);
    }
}
