//! Digital Butterworth design (bilinear transform with prewarping) and
//! zero-phase second-order-section filtering.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::SignalSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Lowpass,
    Highpass,
    Bandpass,
}

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// A designed filter as a cascade of biquads.
#[derive(Debug, Clone)]
pub struct Butterworth {
    pub sections: Vec<Sos>,
    /// Number of poles of the digital filter.
    pub order: usize,
}

impl Butterworth {
    pub fn design(mode: FilterMode, order: usize, cutoffs: &[f64], rate: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("filter order must be at least 1"));
        }
        let nyquist = rate / 2.0;
        let expected = if mode == FilterMode::Bandpass { 2 } else { 1 };
        if cutoffs.len() != expected {
            return Err(Error::invalid(format!(
                "{mode:?} needs {expected} cutoff(s), got {}",
                cutoffs.len()
            )));
        }
        for &f in cutoffs {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::invalid(format!(
                    "cutoff {f} Hz must lie strictly inside (0, {nyquist}) Hz"
                )));
            }
        }
        let fs2 = 2.0 * rate;
        let warp = |f: f64| fs2 * (PI * f / rate).tan();

        // Analog lowpass prototype: poles on the unit circle, unity gain.
        let proto: Vec<Complex64> = (0..order)
            .map(|k| {
                let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
                Complex64::from_polar(1.0, theta)
            })
            .collect();

        let (poles, zeros, gain): (Vec<Complex64>, Vec<Complex64>, f64) = match mode {
            FilterMode::Lowpass => {
                let wc = warp(cutoffs[0]);
                (proto.iter().map(|p| p * wc).collect(), vec![], wc.powi(order as i32))
            }
            FilterMode::Highpass => {
                let wc = warp(cutoffs[0]);
                let prod: Complex64 = proto.iter().map(|p| -p).product();
                (
                    proto.iter().map(|p| wc / p).collect(),
                    vec![Complex64::new(0.0, 0.0); order],
                    (1.0 / prod).re,
                )
            }
            FilterMode::Bandpass => {
                if cutoffs[0] >= cutoffs[1] {
                    return Err(Error::invalid("bandpass cutoffs must be increasing"));
                }
                let (w1, w2) = (warp(cutoffs[0]), warp(cutoffs[1]));
                let bw = w2 - w1;
                let w0 = (w1 * w2).sqrt();
                let mut poles = Vec::with_capacity(2 * order);
                for p in &proto {
                    let half = p * (bw / 2.0);
                    let root = (half * half - w0 * w0).sqrt();
                    poles.push(half + root);
                    poles.push(half - root);
                }
                (poles, vec![Complex64::new(0.0, 0.0); order], bw.powi(order as i32))
            }
        };

        // Bilinear transform; zeros at analog infinity map to z = -1.
        let fs2c = Complex64::new(fs2, 0.0);
        let num: Complex64 = zeros.iter().map(|z| fs2c - z).product();
        let den: Complex64 = poles.iter().map(|p| fs2c - p).product();
        let k = gain * (num / den).re;
        let mut dz: Vec<Complex64> = zeros.iter().map(|z| (fs2c + z) / (fs2c - z)).collect();
        dz.resize(poles.len(), Complex64::new(-1.0, 0.0));
        let dp: Vec<Complex64> = poles.iter().map(|p| (fs2c + p) / (fs2c - p)).collect();

        let sections = zpk_to_sos(&dz, &dp, k);
        Ok(Self { sections, order: dp.len() })
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64, rate: f64) -> Complex64 {
        let w = 2.0 * PI * f / rate;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s.b[0] + s.b[1] * z1 + s.b[2] * z2) / (s.a[0] + s.a[1] * z1 + s.a[2] * z2))
            .product()
    }

    /// Causal cascade filtering with optional initial states.
    fn filter(&self, x: &[f64], zi: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (i, s) in self.sections.iter().enumerate() {
            let [mut z1, mut z2] = zi.map_or([0.0, 0.0], |z| z[i]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }

    /// Steady-state section states for a constant input of `level`.
    fn steady_state(&self, level: f64) -> Vec<[f64; 2]> {
        let mut u = level;
        self.sections
            .iter()
            .map(|s| {
                let y = u * s.dc_gain();
                let z1 = y - s.b[0] * u;
                let z2 = s.b[2] * u - s.a[2] * y;
                u = y;
                [z1, z2]
            })
            .collect()
    }

    /// Forward-backward filtering with odd-reflection padding of
    /// `3 * order` samples per side and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * self.order).min(n.saturating_sub(1));
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.steady_state(ext[0]);
        let mut y = self.filter(&ext, Some(&zi));
        y.reverse();
        let zi = self.steady_state(y[0]);
        let mut y = self.filter(&y, Some(&zi));
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Groups poles and zeros into conjugate pairs and emits biquads.
fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], gain: f64) -> Vec<Sos> {
    let pole_quads = pair_roots(poles);
    let zero_quads = pair_roots(zeros);
    let mut sections: Vec<Sos> = pole_quads
        .iter()
        .zip(zero_quads.iter())
        .map(|(a, b)| Sos { b: *b, a: *a })
        .collect();
    if let Some(first) = sections.first_mut() {
        for v in first.b.iter_mut() {
            *v *= gain;
        }
    }
    sections
}

/// Real quadratic factors `[1, c1, c2]` of a conjugate-closed root set.
fn pair_roots(roots: &[Complex64]) -> Vec<[f64; 3]> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > TOL).collect();
    let mut real: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(f64::total_cmp);
    let mut out: Vec<[f64; 3]> = complex
        .iter()
        .map(|r| [1.0, -2.0 * r.re, r.norm_sqr()])
        .collect();
    for pair in real.chunks(2) {
        match pair {
            [a, b] => out.push([1.0, -(a + b), a * b]),
            [a] => out.push([1.0, -a, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

/// Zero-phase Butterworth filtering of every channel.
pub fn butterworth(
    signal: &SignalSegment,
    mode: FilterMode,
    order: usize,
    cutoffs: &[f64],
) -> Result<SignalSegment> {
    let design = Butterworth::design(mode, order, cutoffs, signal.rate)?;
    let samples = signal.samples.iter().map(|ch| design.filtfilt(ch)).collect();
    Ok(signal.with_samples(samples, signal.rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Squared magnitude of the analog Butterworth prototype evaluated at the
    /// prewarped frequency; independent of the pole/section bookkeeping.
    fn analog_gain_sq(mode: FilterMode, order: usize, cutoffs: &[f64], f: f64, rate: f64) -> f64 {
        let warp = |f: f64| 2.0 * rate * (PI * f / rate).tan();
        let w = warp(f);
        let ratio = match mode {
            FilterMode::Lowpass => w / warp(cutoffs[0]),
            FilterMode::Highpass => warp(cutoffs[0]) / w,
            FilterMode::Bandpass => {
                let (w1, w2) = (warp(cutoffs[0]), warp(cutoffs[1]));
                (w * w - w1 * w2) / (w * (w2 - w1))
            }
        };
        1.0 / (1.0 + ratio.powi(2 * order as i32))
    }

    fn sine(f: f64, n: usize, rate: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / rate).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn response_matches_analog_prototype() {
        let cases: [(FilterMode, usize, &[f64]); 4] = [
            (FilterMode::Highpass, 4, &[0.5]),
            (FilterMode::Bandpass, 4, &[0.5, 8.0]),
            (FilterMode::Bandpass, 2, &[5.0, 15.0]),
            (FilterMode::Lowpass, 3, &[10.0]),
        ];
        for (mode, order, cut) in cases {
            let d = Butterworth::design(mode, order, cut, 125.0).unwrap();
            for f in [0.2, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 30.0, 50.0] {
                let got = d.response(f, 125.0).norm_sqr();
                let want = analog_gain_sq(mode, order, cut, f, 125.0);
                assert!((got - want).abs() < 1e-9, "{mode:?} {f} Hz: {got} vs {want}");
            }
        }
    }

    #[test]
    fn highpass_rejects_dc() {
        let d = Butterworth::design(FilterMode::Highpass, 4, &[0.5], 125.0).unwrap();
        let y = d.filtfilt(&vec![2.5; 500]);
        let m = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(m < 1e-6, "max {m}");
    }

    #[test]
    fn bandpass_passes_4hz_and_stops_30hz() {
        let rate = 125.0;
        let d = Butterworth::design(FilterMode::Bandpass, 4, &[0.5, 8.0], rate).unwrap();
        // Low-cutoff poles ring for several seconds after the padded edges.
        let (n, trim) = (8000, 2500);
        for (f, check) in [(4.0, true), (30.0, false)] {
            let x = sine(f, n, rate);
            let y = d.filtfilt(&x);
            let ratio = rms(&y[trim..n - trim]) / rms(&x[trim..n - trim]);
            let analytic = analog_gain_sq(FilterMode::Bandpass, 4, &[0.5, 8.0], f, rate);
            assert!((ratio - analytic).abs() < 1e-3, "{f} Hz: {ratio} vs {analytic}");
            if check {
                assert!((ratio - 1.0).abs() < 0.05);
            } else {
                assert!(20.0 * ratio.log10() < -20.0);
            }
        }
    }

    #[test]
    fn cutoff_at_nyquist_fails() {
        assert!(Butterworth::design(FilterMode::Highpass, 4, &[62.5], 125.0).is_err());
        assert!(Butterworth::design(FilterMode::Bandpass, 4, &[0.5, 70.0], 125.0).is_err());
        assert!(Butterworth::design(FilterMode::Highpass, 0, &[1.0], 125.0).is_err());
    }

    #[test]
    fn output_length_matches() {
        let d = Butterworth::design(FilterMode::Bandpass, 2, &[5.0, 15.0], 125.0).unwrap();
        for n in [1, 2, 7, 250] {
            assert_eq!(d.filtfilt(&sine(3.0, n, 125.0)).len(), n);
        }
    }
}
