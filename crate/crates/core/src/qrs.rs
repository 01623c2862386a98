//! R-peak detection (Pan-Tompkins) and QRS masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{Butterworth, FilterMode, SignalSegment, LEAD_II};

/// Tunables of the detector. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub band_hz: (f64, f64),
    pub integrator_s: f64,
    pub refractory_s: f64,
    pub t_wave_s: f64,
    pub search_s: f64,
    pub smoothing: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            band_hz: (5.0, 15.0),
            integrator_s: 0.150,
            refractory_s: 0.200,
            t_wave_s: 0.360,
            search_s: 0.040,
            smoothing: 0.125,
        }
    }
}

/// Intermediate signals of the detector, exposed for plotting and tests.
#[derive(Debug, Clone)]
pub struct Stages {
    pub filtered: Vec<f64>,
    pub derivative: Vec<f64>,
    pub integrated: Vec<f64>,
}

fn centered_mean(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(n);
            (prefix[hi] - prefix[lo]) / w as f64
        })
        .collect()
}

pub fn stages(lead: &[f64], rate: f64, cfg: &DetectorConfig) -> Result<Stages> {
    let n = lead.len();
    let bp = Butterworth::design(FilterMode::Bandpass, 1, &[cfg.band_hz.0, cfg.band_hz.1], rate)?;
    let filtered = bp.filtfilt(lead);
    let at = |i: isize| filtered[i.clamp(0, n as isize - 1) as usize];
    let derivative: Vec<f64> = (0..n as isize)
        .map(|i| (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) * rate / 8.0)
        .collect();
    let squared: Vec<f64> = derivative.iter().map(|d| d * d).collect();
    let w = ((cfg.integrator_s * rate).round() as usize).max(1);
    let integrated = centered_mean(&squared, w);
    Ok(Stages { filtered, derivative, integrated })
}

/// R-peak indices of one lead in ascending order.
pub fn detect_r_peaks(lead: &[f64], rate: f64) -> Result<Vec<usize>> {
    detect_r_peaks_with(lead, rate, &DetectorConfig::default())
}

pub fn detect_r_peaks_with(lead: &[f64], rate: f64, cfg: &DetectorConfig) -> Result<Vec<usize>> {
    if !(rate >= 50.0) {
        return Err(Error::invalid(format!("rate {rate} Hz below 50 Hz")));
    }
    let n = lead.len();
    let window = (cfg.integrator_s * rate).round() as usize;
    if n < window.max(4) {
        return Err(Error::TooShort { needed: window.max(4), got: n });
    }
    let first = lead[0];
    if lead.iter().all(|&v| v == first) {
        return Ok(Vec::new());
    }
    let st = stages(lead, rate, cfg)?;
    let mwi = &st.integrated;

    let candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || mwi[i] > mwi[i - 1];
            let right = i + 1 == n || mwi[i] >= mwi[i + 1];
            left && right && mwi[i] > 0.0
        })
        .collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }

    let learn = ((2.0 * rate) as usize).min(n);
    let peak_max = mwi[..learn].iter().copied().fold(0.0, f64::max);
    let mean = mwi[..learn].iter().sum::<f64>() / learn as f64;
    let mut spki = peak_max / 3.0;
    let mut npki = mean / 2.0;
    let a = cfg.smoothing;

    let refractory = (cfg.refractory_s * rate).round() as usize;
    let t_wave = (cfg.t_wave_s * rate).round() as usize;
    let slope_half = (0.075 * rate).round() as usize;
    let slope_at = |i: usize| {
        let lo = i.saturating_sub(slope_half);
        let hi = (i + slope_half + 1).min(n);
        st.derivative[lo..hi].iter().fold(0.0f64, |m, d| m.max(d.abs()))
    };

    let mut qrs: Vec<usize> = Vec::new();
    let mut last_slope = 0.0;
    let mut rr: Vec<usize> = Vec::new();
    let mut last_candidate_pos = 0usize;
    for (ci, &i) in candidates.iter().enumerate() {
        let threshold1 = npki + 0.25 * (spki - npki);
        let v = mwi[i];

        // Searchback for a missed beat when the gap grows too long.
        if let Some(&prev) = qrs.last() {
            if !rr.is_empty() {
                let avg = rr.iter().rev().take(8).sum::<usize>() as f64 / rr.len().min(8) as f64;
                if (i - prev) as f64 > 1.66 * avg {
                    let threshold2 = 0.5 * threshold1;
                    let best = candidates[last_candidate_pos..ci]
                        .iter()
                        .copied()
                        .filter(|&j| j > prev + refractory && mwi[j] > threshold2)
                        .max_by(|&x, &y| mwi[x].total_cmp(&mwi[y]).then(y.cmp(&x)));
                    if let Some(j) = best {
                        spki = 0.25 * mwi[j] + 0.75 * spki;
                        rr.push(j - prev);
                        qrs.push(j);
                        last_slope = slope_at(j);
                    }
                }
            }
        }

        if v > threshold1 {
            match qrs.last().copied() {
                Some(prev) if i - prev < refractory => {
                    if v > mwi[prev] {
                        qrs.pop();
                        if let Some(&before) = qrs.last() {
                            rr.pop();
                            rr.push(i - before);
                        }
                        qrs.push(i);
                        last_slope = slope_at(i);
                    }
                    continue;
                }
                Some(prev) if i - prev < t_wave && slope_at(i) < 0.5 * last_slope => {
                    npki = a * v + (1.0 - a) * npki;
                    continue;
                }
                Some(prev) => rr.push(i - prev),
                None => {}
            }
            spki = a * v + (1.0 - a) * spki;
            qrs.push(i);
            last_slope = slope_at(i);
            last_candidate_pos = ci + 1;
        } else {
            npki = a * v + (1.0 - a) * npki;
        }
    }

    let half = (cfg.search_s * rate).round() as usize;
    let mut out: Vec<usize> = qrs
        .iter()
        .map(|&i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (lo..hi)
                .max_by(|&x, &y| lead[x].total_cmp(&lead[y]).then(y.cmp(&x)))
                .unwrap_or(i)
        })
        .collect();
    out.dedup();
    Ok(out)
}

/// Per-lead binary mask marking samples near detected R peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrsMask {
    /// `mask[lead][sample]`.
    pub mask: Vec<Vec<bool>>,
    pub peak_indices: Vec<Vec<usize>>,
    pub half_width: usize,
}

pub const DEFAULT_HALF_WIDTH_MS: f64 = 50.0;

impl QrsMask {
    pub fn half_width_samples(half_width_ms: f64, rate: f64) -> usize {
        (half_width_ms * rate / 1000.0).round() as usize
    }

    /// Ones on `[p - w, p + w]` around each peak, clipped to `[0, n)`.
    pub fn from_peaks(peaks: &[Vec<usize>], n: usize, rate: f64, half_width_ms: f64) -> Result<Self> {
        let w = Self::half_width_samples(half_width_ms, rate);
        let mut mask = vec![vec![false; n]; peaks.len()];
        for (row, lead_peaks) in mask.iter_mut().zip(peaks) {
            for &p in lead_peaks {
                if p >= n {
                    return Err(Error::invalid(format!("peak index {p} outside 0..{n}")));
                }
                for v in &mut row[p.saturating_sub(w)..=(p + w).min(n - 1)] {
                    *v = true;
                }
            }
        }
        Ok(Self { mask, peak_indices: peaks.to_vec(), half_width: w })
    }

    pub fn len(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of masked samples over all leads.
    pub fn fraction(&self) -> f64 {
        let total: usize = self.mask.iter().map(Vec::len).sum();
        if total == 0 {
            return 0.0;
        }
        self.mask.iter().flatten().filter(|&&m| m).count() as f64 / total as f64
    }

    /// Mask as 0/1 reals in `[lead][sample]` layout.
    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.mask
            .iter()
            .map(|row| row.iter().map(|&m| f64::from(u8::from(m))).collect())
            .collect()
    }

    pub fn full(leads: usize, n: usize) -> Self {
        Self { mask: vec![vec![true; n]; leads], peak_indices: vec![Vec::new(); leads], half_width: 0 }
    }

    pub fn empty(leads: usize, n: usize) -> Self {
        Self { mask: vec![vec![false; n]; leads], peak_indices: vec![Vec::new(); leads], half_width: 0 }
    }
}

pub fn qrs_mask(peaks: &[Vec<usize>], n: usize, rate: f64, half_width_ms: f64) -> Result<QrsMask> {
    QrsMask::from_peaks(peaks, n, rate, half_width_ms)
}

/// Detects peaks on every lead; a lead with no peaks borrows lead II's.
pub fn detect_all_leads(ecg: &SignalSegment) -> Result<Vec<Vec<usize>>> {
    let mut peaks = ecg
        .samples
        .iter()
        .map(|ch| detect_r_peaks(ch, ecg.rate))
        .collect::<Result<Vec<_>>>()?;
    if ecg.channels() > LEAD_II {
        let fallback = peaks[LEAD_II].clone();
        for p in peaks.iter_mut().filter(|p| p.is_empty()) {
            p.clone_from(&fallback);
        }
    }
    Ok(peaks)
}

/// Detection plus masking for a 12-lead segment.
pub fn segment_mask(ecg: &SignalSegment, half_width_ms: f64) -> Result<QrsMask> {
    let peaks = detect_all_leads(ecg)?;
    QrsMask::from_peaks(&peaks, ecg.len(), ecg.rate, half_width_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beat_train(n: usize, rate: f64, r: &[usize]) -> Vec<f64> {
        (0..n)
            .map(|i| {
                r.iter()
                    .map(|&p| {
                        let dt = (i as f64 - p as f64) / rate;
                        (-dt * dt / (2.0 * 0.012f64.powi(2))).exp()
                            - 0.2 * (-(dt - 0.03).powi(2) / (2.0 * 0.01f64.powi(2))).exp()
                            + 0.3 * (-(dt - 0.25).powi(2) / (2.0 * 0.05f64.powi(2))).exp()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn regular_beats_found() {
        let truth: Vec<usize> = (0..8).map(|k| 40 + 125 * k).collect();
        let x = beat_train(1000, 125.0, &truth);
        let found = detect_r_peaks(&x, 125.0).unwrap();
        assert_eq!(found.len(), truth.len(), "{found:?}");
        for (a, b) in found.iter().zip(&truth) {
            assert!(a.abs_diff(*b) <= 3);
        }
    }

    #[test]
    fn close_beats_not_merged() {
        let x = beat_train(250, 125.0, &[80, 130]);
        let found = detect_r_peaks(&x, 125.0).unwrap();
        assert_eq!(found.len(), 2, "{found:?}");
    }

    #[test]
    fn inverted_lead() {
        let truth = [30, 130, 230];
        let x: Vec<f64> = beat_train(250, 125.0, &truth).iter().map(|v| -v).collect();
        let found = detect_r_peaks(&x, 125.0).unwrap();
        assert_eq!(found.len(), 3);
        for (a, b) in found.iter().zip(&truth) {
            assert!(a.abs_diff(*b) <= 5);
        }
    }

    #[test]
    fn zero_and_short() {
        assert!(detect_r_peaks(&[0.0; 250], 125.0).unwrap().is_empty());
        assert!(detect_r_peaks(&[0.0; 10], 125.0).is_err());
        assert!(detect_r_peaks(&[0.0; 250], 40.0).is_err());
    }

    #[test]
    fn mask_layout() {
        let m = qrs_mask(&[vec![100]], 250, 125.0, 50.0).unwrap();
        let on: Vec<usize> = (0..250).filter(|&i| m.mask[0][i]).collect();
        assert_eq!(on, (94..=106).collect::<Vec<_>>());
        let m = qrs_mask(&[vec![]], 250, 125.0, 50.0).unwrap();
        assert!(m.mask[0].iter().all(|&v| !v));
        let m = qrs_mask(&[vec![2]], 250, 125.0, 50.0).unwrap();
        let on: Vec<usize> = (0..250).filter(|&i| m.mask[0][i]).collect();
        assert_eq!(on, (0..=8).collect::<Vec<_>>());
        assert!(qrs_mask(&[vec![250]], 250, 125.0, 50.0).is_err());
    }
}
