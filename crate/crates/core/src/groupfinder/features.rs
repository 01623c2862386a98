use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Systolic amplitude, pulse arrival time and diastolic slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgFeatures {
    pub amplitude: f64,
    /// Seconds. Measured from the R peak, or from the pulse foot when
    /// `from_foot` is set.
    pub transit: f64,
    /// Amplitude units per second.
    pub diastolic_slope: f64,
    pub from_foot: bool,
}

impl PpgFeatures {
    pub fn to_array(&self) -> [f64; 3] {
        [self.amplitude, self.transit, self.diastolic_slope]
    }
}

const MIN_BEAT_S: f64 = 0.3;
const MAX_RISE_S: f64 = 0.35;

/// Systolic peak indices: prominent local maxima at least one minimum beat
/// apart.
pub fn systolic_peaks(x: &[f64], rate: f64) -> Vec<usize> {
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Vec::new();
    }
    let rise = (MAX_RISE_S * rate).round() as usize;
    let mut cands: Vec<usize> = (1..n - 1)
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1])
        .filter(|&i| {
            let base = x[i.saturating_sub(rise)..=i].iter().copied().fold(f64::INFINITY, f64::min);
            x[i] - base >= 0.3 * range
        })
        .collect();
    cands.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let gap = (MIN_BEAT_S * rate).round() as usize;
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| k.abs_diff(c) >= gap) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Index of the minimum on `[lo, hi]`; `latest` picks the last of tied
/// minima instead of the first.
fn argmin(x: &[f64], lo: usize, hi: usize, latest: bool) -> usize {
    (lo..=hi)
        .min_by(|&a, &b| {
            let order = if latest { b.cmp(&a) } else { a.cmp(&b) };
            x[a].total_cmp(&x[b]).then(order)
        })
        .unwrap()
}

fn ls_slope(x: &[f64], lo: usize, hi: usize, rate: f64) -> Option<f64> {
    if hi < lo + 2 {
        return None;
    }
    let n = (hi - lo + 1) as f64;
    let tm = (lo + hi) as f64 / 2.0;
    let ym = x[lo..=hi].iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in x[lo..=hi].iter().enumerate() {
        let t = (lo + i) as f64 - tm;
        sxy += t * (y - ym);
        sxx += t * t;
    }
    Some(sxy / sxx * rate)
}

/// Morphology features of a PPG window. With `r_peaks`, transit is the
/// delay from the preceding R peak to each systolic peak; otherwise it is
/// the foot-to-peak time.
pub fn ppg_features(x: &[f64], rate: f64, r_peaks: Option<&[usize]>) -> Result<PpgFeatures> {
    let peaks = systolic_peaks(x, rate);
    if peaks.is_empty() {
        return Err(Error::NoPeaks("no systolic peak in PPG window".into()));
    }
    let rise = (MAX_RISE_S * rate).round() as usize;
    let n = x.len();

    let mut amps = Vec::new();
    let mut transits = Vec::new();
    let mut complete = Vec::new();
    let mut partial = Vec::new();
    for (k, &p) in peaks.iter().enumerate() {
        let start = if k > 0 { peaks[k - 1].max(p.saturating_sub(rise)) } else { p.saturating_sub(rise) };
        let foot = argmin(x, start, p, true);
        let upstroke_seen = foot < p && (foot > start || k > 0);
        if upstroke_seen {
            amps.push(x[p] - x[foot]);
        }
        match r_peaks {
            Some(rs) => {
                if let Some(&r) = rs.iter().rev().find(|&&r| r < p && p - r <= rise + rise) {
                    transits.push((p - r) as f64 / rate);
                }
            }
            None if upstroke_seen => {
                // Intersecting-tangent foot: the steepest upstroke tangent
                // meets the level of the preceding minimum.
                let (ms, slope) = (foot..p)
                    .map(|i| (i, x[i + 1] - x[i]))
                    .fold((foot, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
                if slope > 0.0 {
                    let mid = ms as f64 + 0.5;
                    let level = 0.5 * (x[ms] + x[ms + 1]);
                    let t_foot = (mid - (level - x[foot]) / slope).max(foot as f64);
                    transits.push((p as f64 - t_foot) / rate);
                }
            }
            None => {}
        }
        // Decay runs to the first local minimum after the peak.
        let end = peaks.get(k + 1).copied().unwrap_or(n - 1);
        let trough = (p + 1..=end).find(|&i| i == end || x[i + 1] >= x[i]).unwrap_or(p);
        if trough > p {
            let span = (trough - p) as f64;
            let lo = p + (0.4 * span).round() as usize;
            let hi = p + (0.8 * span).round() as usize;
            if let Some(s) = ls_slope(x, lo, hi, rate) {
                if trough < n - 1 {
                    complete.push(s);
                } else if span >= 0.15 * rate {
                    partial.push(s);
                }
            }
        }
    }
    if amps.is_empty() {
        // Every peak sits on the window edge; fall back to the window minimum.
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        amps.extend(peaks.iter().map(|&p| x[p] - lo));
    }
    if transits.is_empty() {
        return Err(Error::NoPeaks("no complete upstroke for pulse timing".into()));
    }
    let slopes = if complete.is_empty() { partial } else { complete };
    if slopes.is_empty() {
        return Err(Error::NoPeaks("no diastolic decay in PPG window".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(PpgFeatures {
        amplitude: mean(&amps),
        transit: mean(&transits),
        diastolic_slope: mean(&slopes),
        from_foot: r_peaks.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::synth::{ppg_pulse, PpgMorphology};

    fn clean_ppg(m: &PpgMorphology, rr: f64, r: &[f64], n: usize, rate: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                r.iter()
                    .filter(|&&r0| t - r0 > -0.1 && t - r0 < rr + 0.1)
                    .map(|&r0| ppg_pulse(t - r0, m))
                    .sum()
            })
            .collect()
    }

    fn morph() -> PpgMorphology {
        PpgMorphology { amplitude: 1.0, delay_s: 0.2, rise_s: 0.12, diastolic_slope: -3.0 }
    }

    #[test]
    fn recovers_programmed_values() {
        let rate = 125.0;
        let r: Vec<f64> = (0..4).map(|k| 0.1 + 0.8 * k as f64).collect();
        let x = clean_ppg(&morph(), 0.8, &r, 375, rate);
        let r_idx: Vec<usize> = r.iter().map(|t| (t * rate).round() as usize).collect();
        let f = ppg_features(&x, rate, Some(&r_idx)).unwrap();
        assert!((f.amplitude - 1.0).abs() < 0.1, "{f:?}");
        assert!((f.transit - 0.2).abs() < 0.02, "{f:?}");
        assert!((f.diastolic_slope + 3.0).abs() < 0.3, "{f:?}");
        assert!(!f.from_foot);
        let g = ppg_features(&x, rate, None).unwrap();
        assert!(g.from_foot);
        // Tangent at the steepest point of a raised-cosine rise of length r
        // crosses the baseline r/2 - r/pi after the true foot.
        let r = 0.12;
        assert!((g.transit - r * (0.5 + 1.0 / std::f64::consts::PI)).abs() < 0.008, "{g:?}");
    }

    #[test]
    fn scaling_behaviour() {
        let rate = 125.0;
        let r: Vec<f64> = (0..3).map(|k| 0.15 + 0.75 * k as f64).collect();
        let x = clean_ppg(&morph(), 0.75, &r, 250, rate);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = ppg_features(&x, rate, None).unwrap();
        let b = ppg_features(&x2, rate, None).unwrap();
        assert!((b.amplitude - 2.0 * a.amplitude).abs() < 1e-9);
        assert!((b.diastolic_slope - 2.0 * a.diastolic_slope).abs() < 1e-9);
        assert_eq!(a.transit, b.transit);
    }

    #[test]
    fn flat_signal_fails() {
        assert!(matches!(ppg_features(&[0.3; 250], 125.0, None), Err(Error::NoPeaks(_))));
    }
}
