//! Training loop: masked ε loss plus the reconstruction losses on the
//! deblurred x̂₀.

use std::io::Write;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_dualnoise, gaussian_like, temporal_noise, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::groupfinder::GroupFinder;
use crate::qrs::{segment_mask, QrsMask, DEFAULT_HALF_WIDTH_MS};
use crate::signals::{PairedRecord, SignalSegment};
use crate::spectral::{highfreq_mask, BlurConfig, HIGHFREQ_CUTOFF_HZ, HIGHFREQ_RAMP_HZ};

use super::denoiser::{from_rows, to_rows, Condition, Denoiser, Stage, StageRule, GAMMA};
use super::losses::{axis_unit, loss_align, LossComponents, LossWeights};
use super::optim::{clip_norm, Optimizer, OptimizerKind};
use super::tape::{Tape, Var};

/// Switches for the ablation runs. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub affinity: bool,
    pub frequency: bool,
    pub multi_scale: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { affinity: true, frequency: true, multi_scale: true }
    }
}

impl Ablation {
    pub fn stage_rule(&self) -> StageRule {
        if self.multi_scale { StageRule::Switched } else { StageRule::Fixed(Stage::Structural) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub blur: BlurConfig,
    pub qrs_half_width_ms: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 16,
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(1.0),
            weights: LossWeights::default(),
            blur: BlurConfig::default(),
            qrs_half_width_ms: DEFAULT_HALF_WIDTH_MS,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// One training window with its conditioning and QRS mask.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub ecg: SignalSegment,
    pub ppg: Vec<f64>,
    pub affinity: Vec<f64>,
    pub mask: QrsMask,
}

/// Pairs each record with its subject's cluster centroid affinity; subjects
/// unseen during clustering go through PPG assignment.
pub fn prepare_examples(records: &[PairedRecord], finder: &GroupFinder, half_width_ms: f64) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let k = match finder.subject_labels.get(r.subject_id()) {
                Some(&k) => k,
                None => finder.assign(&r.ppg)?.k,
            };
            Ok(TrainExample {
                ecg: r.ecg.clone(),
                ppg: r.ppg.channel(0).to_vec(),
                affinity: finder.centroid_affinity(k).to_vec(),
                mask: segment_mask(&r.ecg, half_width_ms)?,
            })
        })
        .collect()
}

/// Per-epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lead: f64,
    pub freq: f64,
    pub axis: f64,
    pub align: f64,
    pub total: f64,
    pub eps: f64,
}

pub const HISTORY_HEADER: &str = "epoch,L_L,L_F,L_Stheta,L_a,total,eps_loss";

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut out: W) -> Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", r.epoch, r.lead, r.freq, r.axis, r.align, r.total, r.eps)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub denoiser: Denoiser,
    /// Row 0 scores the initial parameters; row `e` is epoch `e`.
    pub history: Vec<HistoryRow>,
}

/// Generator for `(seed, domain, counter)`, independent of thread layout.
pub fn stream_rng(seed: u64, domain: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(counter);
    rng
}

const DOMAIN_ORDER: u64 = 1;
const DOMAIN_SAMPLE: u64 = 2;

struct SampleOut {
    comps: LossComponents,
    eps: f64,
    total: f64,
    grads: Vec<f64>,
}

/// Step and noise for one training draw.
#[derive(Debug, Clone)]
pub struct Draw {
    pub t: usize,
    pub x_t: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

/// Nodes of the recorded objective.
pub struct Objective {
    pub objective: Var,
    pub eps_loss: Var,
    /// Deblurred x̂₀, `[samples × leads]`.
    pub y: Var,
    pub lead: Var,
    pub freq: Var,
    pub axis: Option<Var>,
    /// Weight `√ᾱ_t` on the reconstruction terms.
    pub weight: f64,
}

/// Records `ε loss + √ᾱ_t (λ₁ L_L / c_L + λ₂ L_F / c_F + λ₃ L_Sθ)` where the
/// reconstruction terms compare the deblurred x̂₀ with `gt`. `c_L` and
/// `c_F` scale the sums to per-sample magnitudes.
#[allow(clippy::too_many_arguments)]
pub fn record_objective(
    tape: &mut Tape,
    den: &Denoiser,
    gt: &[Vec<f64>],
    mask: &QrsMask,
    rate: f64,
    cond: &Condition,
    draw: &Draw,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<Objective> {
    let (n, leads) = (den.cfg.samples, den.cfg.leads);
    let ab = schedule.alpha_bar(draw.t);
    let x_t = tape.leaf(n, leads, to_rows(&draw.x_t));
    let eps_hat = den.forward_tape(tape, x_t, draw.t, cond, cfg.ablation.stage_rule())?;

    // ε error on the noised (non-QRS) support only.
    let keep: Vec<f64> = to_rows(&mask.as_f64()).iter().map(|m| 1.0 - m).collect();
    let support = keep.iter().sum::<f64>().max(1.0);
    let keep = tape.leaf(n, leads, keep);
    let eps = tape.leaf(n, leads, to_rows(&draw.eps));
    let diff = tape.sub(eps_hat, eps);
    let diff = tape.mul(diff, keep);
    let eps_loss = tape.sum_sq(diff);
    let eps_loss = tape.scale(eps_loss, 1.0 / support);

    let noise = tape.scale(eps_hat, (1.0 - ab).sqrt());
    let x0 = tape.sub(x_t, noise);
    let x0 = tape.scale(x0, 1.0 / ab.sqrt());
    let y = if cfg.ablation.frequency {
        let h = highfreq_mask(n, rate, HIGHFREQ_CUTOFF_HZ, HIGHFREQ_RAMP_HZ)?;
        let hx = tape.column_mask(x0, Rc::new(h));
        let gamma = tape.param(&den.store, den.store.id(GAMMA).expect("gamma"));
        let hx = tape.scale_by(hx, gamma);
        tape.add(x0, hx)
    } else {
        x0
    };
    let target = tape.leaf(n, leads, to_rows(gt));
    let d = tape.sub(y, target);
    let lead = tape.pairwise_col_dist(d);
    let freq = tape.dft_norm(d);
    let axis = match axis_unit(gt) {
        Some(u) => {
            let au = tape.axis_unit(y);
            let target = tape.leaf(1, 2, u.to_vec());
            let da = tape.sub(au, target);
            Some(tape.l2_norm(da))
        }
        None => None,
    };

    let weight = ab.sqrt();
    let c_lead = (leads * (leads - 1)) as f64 * (n as f64).sqrt();
    let c_freq = ((leads * n) as f64).sqrt();
    let wl = cfg.weights;
    let a = tape.scale(lead, weight * wl.lead / c_lead);
    let b = tape.scale(freq, weight * wl.freq / c_freq);
    let mut recon = tape.add(a, b);
    if let Some(la) = axis {
        let c = tape.scale(la, weight * wl.axis);
        recon = tape.add(recon, c);
    }
    let objective = tape.add(eps_loss, recon);
    Ok(Objective { objective, eps_loss, y, lead, freq, axis, weight })
}

/// Draws `t` and noise for one example, then scores (and differentiates)
/// the training objective. The alignment term is scored but not
/// differentiated.
fn run_sample<R: Rng>(
    den: &Denoiser,
    ex: &TrainExample,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
    want_grad: bool,
) -> Result<SampleOut> {
    let (n, leads) = (den.cfg.samples, den.cfg.leads);
    let t = rng.random_range(1..=schedule.steps);
    let draw = if cfg.ablation.frequency {
        let f = forward_dualnoise(&ex.ecg, t, schedule, &cfg.blur, &ex.mask, rng)?;
        Draw { t, x_t: f.x_t, eps: f.eps }
    } else {
        let eps = gaussian_like(leads, n, rng);
        Draw { t, x_t: temporal_noise(&ex.ecg.samples, t, schedule, &ex.mask, &eps)?, eps }
    };
    let zero_aff = vec![0.0; ex.affinity.len()];
    let cond = Condition { ppg: &ex.ppg, affinity: if cfg.ablation.affinity { &ex.affinity } else { &zero_aff } };

    let mut tape = Tape::new();
    let o = record_objective(&mut tape, den, &ex.ecg.samples, &ex.mask, ex.ecg.rate, &cond, &draw, schedule, cfg)?;
    let y_leads = from_rows(tape.value(o.y), leads);
    let align = if y_leads.iter().flatten().all(|v| v.is_finite()) {
        loss_align(&y_leads, &ex.ecg.samples, ex.ecg.rate)?
    } else {
        f64::NAN
    };
    let comps = LossComponents {
        lead: tape.scalar(o.lead),
        freq: tape.scalar(o.freq),
        axis: o.axis.map_or(0.0, |v| tape.scalar(v)),
        align,
    };
    let total = tape.scalar(o.objective) + o.weight * cfg.weights.align * align;

    let mut grads = Vec::new();
    if want_grad {
        grads = vec![0.0; den.store.len()];
        let g = tape.backward(o.objective);
        tape.param_grads(&g, &den.store, &mut grads);
    }
    Ok(SampleOut { comps, eps: tape.scalar(o.eps_loss), total, grads })
}

fn accumulate(row: &mut HistoryRow, s: &SampleOut) {
    row.lead += s.comps.lead;
    row.freq += s.comps.freq;
    row.axis += s.comps.axis;
    row.align += s.comps.align;
    row.total += s.total;
    row.eps += s.eps;
}

fn finish(mut row: HistoryRow, count: usize) -> HistoryRow {
    let c = count.max(1) as f64;
    row.lead /= c;
    row.freq /= c;
    row.axis /= c;
    row.align /= c;
    row.total /= c;
    row.eps /= c;
    row
}

/// Scores a parameter set on one deterministic pass over `examples`.
pub fn evaluate_objective(
    den: &Denoiser,
    examples: &[TrainExample],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<HistoryRow> {
    let outs: Vec<Result<SampleOut>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| run_sample(den, ex, schedule, cfg, &mut stream_rng(seed, DOMAIN_SAMPLE, i as u64), false))
        .collect();
    let mut row = HistoryRow::default();
    for o in outs {
        accumulate(&mut row, &o?);
    }
    Ok(finish(row, examples.len()))
}

/// Mini-batch training. Deterministic for a given seed regardless of the
/// rayon thread count: every sample has its own generator stream and
/// batch gradients are reduced in index order.
pub fn train(
    examples: &[TrainExample],
    denoiser: Denoiser,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.blur.validate(examples.first().map_or(125.0, |e| e.ecg.rate))?;
    if examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    if denoiser.cfg.steps != schedule.steps {
        return Err(Error::invalid(format!(
            "denoiser covers {} steps but the schedule has {}",
            denoiser.cfg.steps, schedule.steps
        )));
    }
    let mut den = denoiser;
    let mut mask = den.store.trainable_mask();
    if !cfg.ablation.frequency {
        let e = den.store.entry(den.store.id(GAMMA).expect("gamma")).clone();
        mask[e.offset] = 0.0;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, den.store.len());
    let n = examples.len() as u64;
    let mut history = vec![evaluate_objective(&den, examples, schedule, cfg, seed)?];

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(seed, DOMAIN_ORDER, epoch as u64));
        let mut row = HistoryRow { epoch, ..HistoryRow::default() };
        for batch in order.chunks(cfg.batch_size) {
            let den_ref = &den;
            let outs: Vec<Result<SampleOut>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(seed, DOMAIN_SAMPLE, epoch as u64 * n + i as u64 + n);
                    run_sample(den_ref, &examples[i], schedule, cfg, &mut rng, true)
                })
                .collect();
            let mut grads = vec![0.0; den.store.len()];
            for o in outs {
                let o = o?;
                if !o.total.is_finite() || o.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, last_finite: den.store.values().to_vec() });
                }
                accumulate(&mut row, &o);
                for (g, x) in grads.iter_mut().zip(&o.grads) {
                    *g += x / batch.len() as f64;
                }
            }
            if let Some(c) = cfg.clip_norm {
                clip_norm(&mut grads, c);
            }
            opt.step(den.store.values_mut(), &grads, &mask);
        }
        let row = finish(row, examples.len());
        log::debug!("epoch {epoch}: total {:.4} eps {:.4}", row.total, row.eps);
        history.push(row);
    }
    Ok(TrainOutcome { denoiser: den, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use crate::model::denoiser::DenoiserConfig;
    use crate::signals::synth::{synth_cohort, CohortSpec};
    use rand::SeedableRng;

    fn examples(count: usize) -> Vec<TrainExample> {
        let spec = CohortSpec { segments_per_subject: 1, ..CohortSpec::default() };
        synth_cohort(&spec, 21)
            .unwrap()
            .into_iter()
            .take(count)
            .map(|r| TrainExample {
                mask: segment_mask(&r.ecg, DEFAULT_HALF_WIDTH_MS).unwrap(),
                ppg: r.ppg.channel(0).to_vec(),
                affinity: vec![0.1; 21],
                ecg: r.ecg,
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let s = linear_schedule(20, 1e-4, 0.2).unwrap();
        let den = Denoiser::new(&DenoiserConfig::with_steps(20), 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&examples(2), den.clone(), &s, &cfg, 3).unwrap();
        assert_eq!(out.denoiser, den);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn same_seed_same_history() {
        let s = linear_schedule(20, 1e-4, 0.2).unwrap();
        let den = Denoiser::new(&DenoiserConfig::with_steps(20), 1).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let ex = examples(3);
        let a = train(&ex, den.clone(), &s, &cfg, 8).unwrap();
        let b = train(&ex, den, &s, &cfg, 8).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.denoiser, b.denoiser);
        assert!(a.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_history_csv(&[HistoryRow { epoch: 3, total: 1.5, ..HistoryRow::default() }], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,L_L,L_F,L_Stheta,L_a,total,eps_loss");
        assert!(lines.next().unwrap().starts_with("3,0.000000000,"));
    }

    /// Finite-difference check of the full training objective on a toy
    /// denoiser; returns the worst relative error.
    pub(crate) fn objective_gradient_error(seed: u64, t: usize) -> f64 {
        use rand_distr::StandardNormal;
        let dcfg = DenoiserConfig { samples: 16, leads: 12, channels: 3, d_k: 2, ppg_hidden: 2, affinity_dim: 4, steps: 9 };
        let s = linear_schedule(9, 1e-4, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut den = Denoiser::new(&dcfg, seed).unwrap();
        let gid = den.store.id(GAMMA).unwrap();
        den.store.slice_mut(gid)[0] = 0.3;
        let mut randm = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect()).collect()
        };
        let gt = randm(12, 16);
        let x_t = randm(12, 16);
        let eps = randm(12, 16);
        let ppg = randm(1, 16).remove(0);
        let aff = randm(1, 4).remove(0);
        let mask = QrsMask {
            mask: (0..12).map(|l| (0..16).map(|i| (i + l) % 5 == 0).collect()).collect(),
            peak_indices: vec![Vec::new(); 12],
            half_width: 0,
        };
        let draw = Draw { t, x_t, eps };
        let cond = Condition { ppg: &ppg, affinity: &aff };
        let cfg = TrainConfig::default();
        let value = |den: &Denoiser| -> f64 {
            let mut tape = Tape::new();
            let o = record_objective(&mut tape, den, &gt, &mask, 125.0, &cond, &draw, &s, &cfg).unwrap();
            tape.scalar(o.objective)
        };
        let mut tape = Tape::new();
        let o = record_objective(&mut tape, &den, &gt, &mask, 125.0, &cond, &draw, &s, &cfg).unwrap();
        let g = tape.backward(o.objective);
        let mut analytic = vec![0.0; den.store.len()];
        tape.param_grads(&g, &den.store, &mut analytic);
        let trainable = den.store.trainable_mask();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..den.store.len() {
            if trainable[i] == 0.0 {
                continue;
            }
            let base = den.store.values()[i];
            den.store.values_mut()[i] = base + h;
            let up = value(&den);
            den.store.values_mut()[i] = base - h;
            let down = value(&den);
            den.store.values_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        for (seed, t) in [(1, 9), (2, 5), (3, 1)] {
            let e = objective_gradient_error(seed, t);
            assert!(e < 1e-4, "seed {seed} t {t}: {e}");
        }
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let s = linear_schedule(20, 1e-4, 0.2).unwrap();
        let den = Denoiser::new(&DenoiserConfig::with_steps(30), 1).unwrap();
        assert!(train(&examples(1), den, &s, &TrainConfig::default(), 0).is_err());
    }
}
