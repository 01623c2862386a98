//! Variance schedule, the frequency/temporal forward process and
//! DDPM/DDIM reverse updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrs::QrsMask;
use crate::signals::SignalSegment;
use crate::spectral::{dft, frequency_blur, gaussian_lowpass_mask, idft, BlurConfig};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.2;

/// Linear β schedule. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_end < 1.0) {
        return Err(Error::invalid(format!("beta_end must be < 1, got {beta_end}")));
    }
    if !(beta_start > 0.0 && beta_start < beta_end) {
        return Err(Error::invalid("need 0 < beta_start < beta_end"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut log_acc = 0.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            log_acc += (-b).ln_1p();
            log_acc.exp()
        })
        .collect();
    Ok(DiffusionSchedule { steps, betas, alphas, alpha_bars })
}

impl DiffusionSchedule {
    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bars[t - 1] }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("t={t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    /// Noise fraction `t / T`.
    pub fn fraction(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }
}

/// Result of one forward draw. Channel-major like [`SignalSegment`].
#[derive(Debug, Clone)]
pub struct ForwardSample {
    pub x_t: Vec<Vec<f64>>,
    pub x_blur: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
}

/// Frequency stage only: Gaussian lowpass plus spectral noise.
pub fn blur_segment<R: Rng + ?Sized>(
    x0: &SignalSegment,
    t: usize,
    schedule: &DiffusionSchedule,
    cfg: &BlurConfig,
    rng: &mut R,
) -> Result<SignalSegment> {
    schedule.check_t(t)?;
    cfg.validate(x0.rate)?;
    let mask = gaussian_lowpass_mask(t, schedule.steps, x0.len(), x0.rate, cfg)?;
    let spec = frequency_blur(&dft(x0), &mask, cfg.sigma_f, rng)?;
    Ok(idft(&spec, x0)?.0)
}

/// `√ᾱ_t·x_blur + √(1−ᾱ_t)·(1−m)⊙ε`.
pub fn temporal_noise(
    x_blur: &[Vec<f64>],
    t: usize,
    schedule: &DiffusionSchedule,
    mask: &QrsMask,
    eps: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    schedule.check_t(t)?;
    let n = x_blur.first().map_or(0, Vec::len);
    if mask.mask.len() != x_blur.len() || mask.mask.iter().any(|m| m.len() != n) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{n} mask", x_blur.len()),
            got: format!("{}x{}", mask.mask.len(), mask.len()),
        });
    }
    let (a, s) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
    Ok(x_blur
        .iter()
        .zip(&mask.mask)
        .zip(eps)
        .map(|((x, m), e)| {
            x.iter()
                .zip(m)
                .zip(e)
                .map(|((&x, &q), &e)| if q { a * x } else { a * x + s * e })
                .collect()
        })
        .collect())
}

pub fn gaussian_like<R: Rng + ?Sized>(channels: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..channels).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Two-stage forward draw at step `t`. The blur noise is drawn before ε.
pub fn forward_dualnoise<R: Rng + ?Sized>(
    x0: &SignalSegment,
    t: usize,
    schedule: &DiffusionSchedule,
    cfg: &BlurConfig,
    mask: &QrsMask,
    rng: &mut R,
) -> Result<ForwardSample> {
    let x_blur = blur_segment(x0, t, schedule, cfg, rng)?.samples;
    let eps = gaussian_like(x0.channels(), x0.len(), rng);
    let x_t = temporal_noise(&x_blur, t, schedule, mask, &eps)?;
    Ok(ForwardSample { x_t, x_blur, eps })
}

/// Ancestral update with σ_t = √β_t; no noise at t = 1.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let a = schedule.alpha(t);
    let c = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { schedule.beta(t).sqrt() } else { 0.0 };
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let mean = (x - c * e) / a.sqrt();
            if sigma > 0.0 { mean + sigma * rng.sample::<f64, _>(StandardNormal) } else { mean }
        })
        .collect())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: a.len().to_string(), got: b.len().to_string() });
    }
    Ok(())
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], schedule: &DiffusionSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - s * e) / a).collect()
}

/// Clamps `x̂₀` to `±limit` and returns the noise estimate consistent
/// with the clamped value.
pub fn clip_eps(x_t: &[f64], t: usize, eps_hat: &[f64], schedule: &DiffusionSchedule, limit: f64) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    predict_x0(x_t, t, eps_hat, schedule)
        .iter()
        .zip(x_t)
        .map(|(&x0, &x)| (x - a * x0.clamp(-limit, limit)) / s)
        .collect()
}

/// DDIM update from `t` to `t_prev` (0 means the clean end point). `eta`
/// interpolates toward DDPM-like stochasticity.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    schedule: &DiffusionSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x_t, eps_hat)?;
    if t_prev > t {
        return Err(Error::invalid(format!("t_prev={t_prev} exceeds t={t}")));
    }
    if t_prev == t {
        return Ok(x_t.to_vec());
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let x0 = predict_x0(x_t, t, eps_hat, schedule);
    Ok(x0
        .iter()
        .zip(eps_hat)
        .map(|(&x0, &e)| {
            let v = ab_prev.sqrt() * x0 + dir * e;
            if sigma > 0.0 { v + sigma * rng.sample::<f64, _>(StandardNormal) } else { v }
        })
        .collect())
}

/// Sampling timesteps, strictly decreasing from T. The last update goes
/// from `timesteps.last()` to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    pub timesteps: Vec<usize>,
    pub eta: f64,
    /// Clamp `x̂₀` to `±x0_clip` before each update.
    #[serde(default)]
    pub x0_clip: Option<f64>,
}

pub const DDIM_STEPS: usize = 50;
pub const X0_CLIP: f64 = 4.0;
/// Coarse strides of 5 over the first 15 steps, then unit strides: 110 grid
/// units in total.
const COARSE_STEPS: usize = 15;
const COARSE_STRIDE: usize = 5;
const GRID_UNITS: usize = 110;

impl DdimPlan {
    /// Gaps between consecutive timesteps, including the final step to 0.
    pub fn strides(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.timesteps.windows(2).map(|w| w[0] - w[1]).collect();
        if let Some(&last) = self.timesteps.last() {
            out.push(last);
        }
        out
    }

    /// `(t, t_prev)` pairs in sampling order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.timesteps.windows(2).map(|w| (w[0], w[1])).collect();
        if let Some(&last) = self.timesteps.last() {
            out.push((last, 0));
        }
        out
    }
}

/// Stride plan. For `steps >= 110` the 5:1 grid is scaled onto `[1, steps]`;
/// shorter schedules fall back to `s` evenly spaced steps.
pub fn ddim_plan(steps: usize, s: usize, eta: f64) -> Result<DdimPlan> {
    if steps == 0 || s == 0 {
        return Err(Error::invalid("plan needs T >= 1 and S >= 1"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta must be non-negative"));
    }
    let mut ts: Vec<usize> = if steps >= GRID_UNITS && s == DDIM_STEPS {
        // Grid units 110..=1 map affinely onto T..=1, exact at T = 110.
        let scale = (steps - 1) as f64 / (GRID_UNITS - 1) as f64;
        let mut units = GRID_UNITS;
        (0..DDIM_STEPS)
            .map(|j| {
                let t = 1 + ((units - 1) as f64 * scale).round() as usize;
                units -= if j < COARSE_STEPS { COARSE_STRIDE } else { 1 };
                t
            })
            .collect()
    } else {
        if steps < GRID_UNITS {
            log::warn!("T={steps} is below {GRID_UNITS}; using {s} evenly spaced DDIM steps");
        } else {
            log::warn!("S={s} differs from {DDIM_STEPS}; using evenly spaced DDIM steps");
        }
        let s = s.min(steps);
        let span = (steps - 1) as f64 / (s.max(2) - 1) as f64;
        (0..s).map(|j| ((steps as f64 - j as f64 * span).round() as usize).max(1)).collect()
    };
    ts.dedup();
    Ok(DdimPlan { timesteps: ts, eta, x0_clip: Some(X0_CLIP) })
}
