//! Unitary DFT, blur/deblur masks and entropy diagnostics.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::SignalSegment;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let fft = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    fft.process(buf);
    let s = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Unitary forward DFT of a real sequence.
pub fn dft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    buf
}

/// Unitary forward DFT, in place.
pub fn dft_complex(buf: &mut [Complex64]) {
    transform(buf, false);
}

/// Unitary inverse DFT, in place.
pub fn idft_complex(buf: &mut [Complex64]) {
    transform(buf, true);
}

/// Inverse DFT keeping the real part; also returns the largest discarded
/// imaginary magnitude.
pub fn idft_real(coeffs: &[Complex64]) -> (Vec<f64>, f64) {
    let mut buf = coeffs.to_vec();
    transform(&mut buf, true);
    let residue = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    (buf.into_iter().map(|c| c.re).collect(), residue)
}

/// Frequency in Hz represented by bin `k` of an `n`-point DFT (folded).
pub fn bin_frequency(k: usize, n: usize, rate: f64) -> f64 {
    k.min(n - k) as f64 * rate / n as f64
}

/// Per-channel unitary spectrum; `coeffs[channel][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub coeffs: Vec<Vec<Complex64>>,
    pub rate: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.coeffs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().flatten().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

pub fn dft(x: &SignalSegment) -> Spectrum {
    Spectrum {
        coeffs: x.samples.iter().map(|ch| dft_real(ch)).collect(),
        rate: x.rate,
    }
}

/// Real inverse of a spectrum, written into the layout of `like`. The
/// second value is the largest imaginary residue that was dropped.
pub fn idft(spec: &Spectrum, like: &SignalSegment) -> Result<(SignalSegment, f64)> {
    if spec.coeffs.len() != like.channels() || spec.len() != like.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", like.channels(), like.len()),
            got: format!("{}x{}", spec.coeffs.len(), spec.len()),
        });
    }
    let mut residue = 0.0f64;
    let samples = spec
        .coeffs
        .iter()
        .map(|c| {
            let (x, r) = idft_real(c);
            residue = residue.max(r);
            x
        })
        .collect();
    Ok((like.with_samples(samples, spec.rate), residue))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthProfile {
    /// Cutoff grows with t.
    PaperLiteral,
    /// Cutoff shrinks with t down to `omega_min`.
    Inverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    pub sigma_f: f64,
    /// Highest signal frequency in Hz; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub profile: BandwidthProfile,
    /// Floor on the inverted-profile cutoff, Hz.
    pub omega_min: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { sigma_f: 0.05, f_max: None, profile: BandwidthProfile::Inverted, omega_min: 0.5 }
    }
}

impl BlurConfig {
    pub fn validate(&self, rate: f64) -> Result<()> {
        if !(self.sigma_f >= 0.0 && self.sigma_f.is_finite()) {
            return Err(Error::invalid("sigma_f must be non-negative"));
        }
        if let Some(f) = self.f_max {
            if !(f > 0.0 && f <= rate / 2.0) {
                return Err(Error::invalid(format!("f_max {f} outside (0, {}]", rate / 2.0)));
            }
        }
        if !(self.omega_min > 0.0) {
            return Err(Error::invalid("omega_min must be positive"));
        }
        Ok(())
    }

    /// Gaussian cutoff in Hz at step `t` of `total`.
    pub fn cutoff(&self, t: usize, total: usize, rate: f64) -> Result<f64> {
        if total == 0 {
            return Err(Error::invalid("total steps must be positive"));
        }
        if t > total {
            return Err(Error::invalid(format!("t={t} exceeds T={total}")));
        }
        let f_max = self.f_max.unwrap_or(rate / 2.0);
        let r = t as f64 / total as f64;
        Ok(match self.profile {
            BandwidthProfile::PaperLiteral => PI * r * f_max,
            BandwidthProfile::Inverted => (PI * (1.0 - r) * f_max).max(self.omega_min),
        })
    }
}

/// `exp(-f^2 / (2 w^2))` per DFT bin. Leads share one mask, so a single row
/// is returned.
pub fn gaussian_lowpass_mask(
    t: usize,
    total: usize,
    n: usize,
    rate: f64,
    cfg: &BlurConfig,
) -> Result<Vec<f64>> {
    let w = cfg.cutoff(t, total, rate)?;
    Ok((0..n)
        .map(|k| {
            let f = bin_frequency(k, n, rate);
            if w == 0.0 {
                if f == 0.0 { 1.0 } else { 0.0 }
            } else {
                (-f * f / (2.0 * w * w)).exp()
            }
        })
        .collect())
}

/// Adds conjugate-symmetric complex Gaussian noise so that every bin gets
/// `E|e_k|^2 = sigma_f^2` and the time signal stays real.
pub fn add_spectral_noise<R: Rng + ?Sized>(coeffs: &mut [Complex64], sigma_f: f64, rng: &mut R) {
    let n = coeffs.len();
    if sigma_f == 0.0 || n == 0 {
        return;
    }
    let half = sigma_f / 2f64.sqrt();
    coeffs[0].re += sigma_f * rng.sample::<f64, _>(StandardNormal);
    for k in 1..n.div_ceil(2) {
        let e = Complex64::new(
            half * rng.sample::<f64, _>(StandardNormal),
            half * rng.sample::<f64, _>(StandardNormal),
        );
        coeffs[k] += e;
        coeffs[n - k] += e.conj();
    }
    if n.is_multiple_of(2) {
        coeffs[n / 2].re += sigma_f * rng.sample::<f64, _>(StandardNormal);
    }
}

/// `X * mask + noise`.
pub fn frequency_blur<R: Rng + ?Sized>(
    spec: &Spectrum,
    mask: &[f64],
    sigma_f: f64,
    rng: &mut R,
) -> Result<Spectrum> {
    if mask.len() != spec.len() {
        return Err(Error::ShapeMismatch {
            expected: spec.len().to_string(),
            got: mask.len().to_string(),
        });
    }
    let coeffs = spec
        .coeffs
        .iter()
        .map(|ch| {
            let mut out: Vec<Complex64> = ch.iter().zip(mask).map(|(c, m)| c * m).collect();
            add_spectral_noise(&mut out, sigma_f, rng);
            out
        })
        .collect();
    Ok(Spectrum { coeffs, rate: spec.rate })
}

/// Blurs a real channel directly: lowpass mask, spectral noise, back to time.
pub fn blur_channel<R: Rng + ?Sized>(x: &[f64], mask: &[f64], sigma_f: f64, rng: &mut R) -> Vec<f64> {
    let mut c = dft_real(x);
    for (v, m) in c.iter_mut().zip(mask) {
        *v *= m;
    }
    add_spectral_noise(&mut c, sigma_f, rng);
    idft_real(&c).0
}

/// Smoothstep ramp: 0 at or below `f_lo`, 1 at or above `f_lo + width`.
pub fn highfreq_mask(n: usize, rate: f64, f_lo: f64, width: f64) -> Result<Vec<f64>> {
    if !(f_lo < rate / 2.0) || !(f_lo >= 0.0) {
        return Err(Error::invalid(format!("f_lo {f_lo} must lie in [0, {})", rate / 2.0)));
    }
    if !(width > 0.0) {
        return Err(Error::invalid("ramp width must be positive"));
    }
    Ok((0..n)
        .map(|k| {
            let s = ((bin_frequency(k, n, rate) - f_lo) / width).clamp(0.0, 1.0);
            s * s * (3.0 - 2.0 * s)
        })
        .collect())
}

pub const HIGHFREQ_CUTOFF_HZ: f64 = 15.0;
pub const HIGHFREQ_RAMP_HZ: f64 = 2.0;

/// `idft(dft(x) * mask)` for a real, conjugate-symmetric mask. The
/// operator is self-adjoint.
pub fn apply_real_mask(x: &[f64], mask: &[f64]) -> Vec<f64> {
    let mut c = dft_real(x);
    for (v, m) in c.iter_mut().zip(mask) {
        *v *= m;
    }
    idft_real(&c).0
}

/// High-frequency enhancement `x + gamma * H(x)` per channel.
pub fn frequency_deblur(x: &SignalSegment, gamma: f64) -> Result<SignalSegment> {
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite"));
    }
    let mask = highfreq_mask(x.len(), x.rate, HIGHFREQ_CUTOFF_HZ, HIGHFREQ_RAMP_HZ)?;
    let samples = x
        .samples
        .iter()
        .map(|ch| {
            let h = apply_real_mask(ch, &mask);
            ch.iter().zip(h).map(|(a, b)| a + gamma * b).collect()
        })
        .collect();
    Ok(x.with_samples(samples, x.rate))
}

/// Shannon entropy (nats) of a `bins`-bin histogram over `[min, max]`.
pub fn time_entropy(x: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in x {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(entropy_of(counts.iter().map(|&c| c as f64)))
}

fn entropy_of(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().sum();
    -weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let p = w / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// One-sided normalized power, bins `1..=N/2`.
pub fn one_sided_psd(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    let c = dft_real(x);
    let p: Vec<f64> = c[1..=x.len() / 2].iter().map(|v| v.norm_sqr()).collect();
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoSpectralMass);
    }
    Ok(p.into_iter().map(|v| v / total).collect())
}

/// Entropy (nats) of a non-negative power vector after normalization.
pub fn psd_entropy(psd: &[f64]) -> Result<f64> {
    if !(psd.iter().sum::<f64>() > 0.0) {
        return Err(Error::NoSpectralMass);
    }
    Ok(entropy_of(psd.iter().copied()))
}

/// Entropy (nats) of the normalized one-sided power spectrum, DC excluded.
pub fn spectral_entropy(x: &[f64]) -> Result<f64> {
    psd_entropy(&one_sided_psd(x)?)
}
