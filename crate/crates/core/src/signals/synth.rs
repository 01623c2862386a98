//! Synthetic paired PPG / 12-lead ECG cohorts with known ground truth.
//!
//! Each beat is a sum of Gaussian P, Q, R, S and T waves. Limb leads are
//! projections of per-wave frontal-plane vectors onto the hexaxial lead
//! angles, so Einthoven's and Goldberger's relations hold by construction.
//! Chest leads mix the same waves with per-group weights, which is what
//! gives each group its own V1..V6 correlation structure. The PPG is a
//! delayed pulse (cosine rise, linear diastolic decay) driven by the same
//! R-peak train.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    butterworth, lead_names, resample, segment, znorm, Demographics, FilterMode, PairedRecord,
    Preprocessor, SignalSegment, Truth, CHEST_LEADS,
};

/// Hexaxial angles (degrees) of I, II, III, aVR, aVL, aVF.
const LIMB_ANGLES: [f64; 6] = [0.0, 60.0, 120.0, -150.0, -30.0, 90.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgMorphology {
    /// Systolic amplitude above the pulse foot.
    pub amplitude: f64,
    /// R peak to systolic peak, seconds.
    pub delay_s: f64,
    /// Foot to systolic peak, seconds.
    pub rise_s: f64,
    /// Diastolic decay slope, amplitude units per second (negative).
    pub diastolic_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub subjects: usize,
    pub heart_rate_bpm: [f64; 2],
    /// Mean frontal QRS axis, degrees.
    pub frontal_axis_deg: f64,
    /// R-wave weight per chest lead V1..V6.
    pub chest_r: [f64; 6],
    /// S-wave depth per chest lead.
    pub chest_s: [f64; 6],
    /// T-wave weight per chest lead.
    pub chest_t: [f64; 6],
    pub ppg: PpgMorphology,
    /// Mean and standard deviation of age in years.
    pub age: [f64; 2],
    pub male_fraction: f64,
    /// Prevalence of each binary medical flag.
    pub flag_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub source_rate: f64,
    pub segments_per_subject: usize,
    /// White measurement noise on every channel (raw units).
    pub noise_std: f64,
    /// Amplitude of low-frequency baseline wander.
    pub baseline_wander: f64,
    /// Relative per-subject jitter of the programmed amplitudes.
    pub amplitude_jitter: f64,
    pub groups: Vec<GroupSpec>,
    pub preprocess: Preprocessor,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            source_rate: 500.0,
            segments_per_subject: 4,
            noise_std: 0.02,
            baseline_wander: 0.1,
            amplitude_jitter: 0.05,
            groups: default_groups(7),
            preprocess: Preprocessor::default(),
        }
    }
}

/// 6 + 5 + 5 subjects with four windows each: 64 paired records.
pub fn desk_cohort() -> CohortSpec {
    let mut groups = default_groups(5);
    groups[0].subjects = 6;
    groups[2].subjects = 5;
    CohortSpec { groups, ..CohortSpec::default() }
}

/// Three well-separated groups: normal R-wave progression, poor R-wave
/// progression, and a hypertrophy-like pattern with lateral T inversion.
pub fn default_groups(subjects: usize) -> Vec<GroupSpec> {
    vec![
        GroupSpec {
            subjects,
            heart_rate_bpm: [60.0, 80.0],
            frontal_axis_deg: 60.0,
            chest_r: [0.2, 0.4, 0.7, 1.1, 1.3, 1.1],
            chest_s: [1.0, 1.3, 0.9, 0.5, 0.3, 0.15],
            chest_t: [-0.1, 0.2, 0.35, 0.4, 0.35, 0.3],
            ppg: PpgMorphology { amplitude: 1.0, delay_s: 0.18, rise_s: 0.10, diastolic_slope: -3.5 },
            age: [35.0, 8.0],
            male_fraction: 0.5,
            flag_rates: vec![0.05, 0.1, 0.0],
        },
        GroupSpec {
            subjects,
            heart_rate_bpm: [70.0, 90.0],
            frontal_axis_deg: 20.0,
            chest_r: [0.1, 0.15, 0.2, 0.3, 0.6, 0.8],
            chest_s: [1.2, 1.4, 1.3, 1.0, 0.6, 0.3],
            chest_t: [0.2, 0.3, 0.2, 0.1, 0.05, 0.1],
            ppg: PpgMorphology { amplitude: 1.0, delay_s: 0.24, rise_s: 0.16, diastolic_slope: -3.0 },
            age: [58.0, 8.0],
            male_fraction: 0.6,
            flag_rates: vec![0.3, 0.5, 0.1],
        },
        GroupSpec {
            subjects: subjects.saturating_sub(1).max(1),
            heart_rate_bpm: [60.0, 100.0],
            frontal_axis_deg: 0.0,
            chest_r: [0.1, 0.3, 0.8, 1.8, 2.2, 2.0],
            chest_s: [2.0, 2.4, 1.2, 0.3, 0.1, 0.05],
            chest_t: [0.3, 0.4, 0.2, -0.2, -0.3, -0.3],
            ppg: PpgMorphology { amplitude: 1.0, delay_s: 0.30, rise_s: 0.22, diastolic_slope: -4.0 },
            age: [72.0, 6.0],
            male_fraction: 0.8,
            flag_rates: vec![0.4, 0.7, 0.9],
        },
    ]
}

/// Wave centres (seconds from R) and widths.
#[derive(Debug, Clone, Copy)]
struct Wave {
    centre: f64,
    width: f64,
}

const P_WAVE: Wave = Wave { centre: -0.16, width: 0.022 };
const Q_WAVE: Wave = Wave { centre: -0.025, width: 0.008 };
const R_WAVE: Wave = Wave { centre: 0.0, width: 0.010 };
const S_WAVE: Wave = Wave { centre: 0.025, width: 0.010 };

fn t_wave(rr: f64) -> Wave {
    Wave { centre: 0.18 + 0.1 * rr, width: 0.045 }
}

fn gauss(t: f64, w: Wave) -> f64 {
    let z = (t - w.centre) / w.width;
    (-0.5 * z * z).exp()
}

/// Per-lead weights of the five waves, in P, Q, R, S, T order.
#[derive(Debug, Clone)]
struct LeadMixing {
    weights: [[f64; 5]; 12],
}

impl LeadMixing {
    fn for_group(g: &GroupSpec, jitter: &mut impl FnMut() -> f64) -> Self {
        let axis = g.frontal_axis_deg;
        // Frontal vectors: (magnitude, angle) for P, Q, R, S, T.
        let frontal = [
            (0.15 * jitter(), 55.0),
            (-0.1 * jitter(), axis),
            (1.0 * jitter(), axis),
            (-0.25 * jitter(), axis + 30.0),
            (0.3 * jitter(), axis - 10.0),
        ];
        let mut weights = [[0.0; 5]; 12];
        for (lead, &angle) in LIMB_ANGLES.iter().enumerate() {
            // Augmented leads read sqrt(3)/2 of the hexaxial projection.
            let scale = if lead >= 3 { 0.75f64.sqrt() } else { 1.0 };
            for (c, &(mag, dir)) in frontal.iter().enumerate() {
                weights[lead][c] = scale * mag * (dir - angle).to_radians().cos();
            }
        }
        for m in 0..6 {
            weights[6 + m] = [
                0.1 * jitter(),
                -0.05 * jitter(),
                g.chest_r[m] * jitter(),
                -g.chest_s[m] * jitter(),
                g.chest_t[m] * jitter(),
            ];
        }
        Self { weights }
    }

    fn beat(&self, lead: usize, t: f64, rr: f64) -> f64 {
        let w = &self.weights[lead];
        w[0] * gauss(t, P_WAVE)
            + w[1] * gauss(t, Q_WAVE)
            + w[2] * gauss(t, R_WAVE)
            + w[3] * gauss(t, S_WAVE)
            + w[4] * gauss(t, t_wave(rr))
    }
}

/// Single-beat PPG waveform at `tau` seconds after the R peak.
pub fn ppg_pulse(tau: f64, m: &PpgMorphology) -> f64 {
    let foot = m.delay_s - m.rise_s;
    if tau < foot {
        0.0
    } else if tau < m.delay_s {
        let u = (tau - foot) / m.rise_s;
        m.amplitude * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    } else {
        (m.amplitude + m.diastolic_slope * (tau - m.delay_s)).max(0.0)
    }
}

impl GroupSpec {
    fn validate(&self, idx: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("group {idx}: {what}")));
        let [lo, hi] = self.heart_rate_bpm;
        if !(lo >= 30.0 && hi <= 200.0 && lo <= hi) {
            return bad("heart-rate range must satisfy 30 <= lo <= hi <= 200 bpm");
        }
        let p = &self.ppg;
        if !(p.amplitude > 0.0 && p.rise_s > 0.0 && p.delay_s >= p.rise_s) {
            return bad("PPG needs amplitude > 0 and 0 < rise <= delay");
        }
        if !(p.diastolic_slope < 0.0) {
            return bad("diastolic slope must be negative");
        }
        let pulse_len = p.rise_s + p.amplitude / -p.diastolic_slope;
        if pulse_len >= 60.0 / hi {
            return bad("PPG pulse does not decay within the shortest RR interval");
        }
        if !(self.age[1] >= 0.0) || !(0.0..=1.0).contains(&self.male_fraction) {
            return bad("age sd must be >= 0 and male fraction in [0, 1]");
        }
        if self.flag_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("flag rates must lie in [0, 1]");
        }
        Ok(())
    }

    /// Pearson matrix of the noise-free chest leads over one beat at the
    /// centre of the heart-rate range.
    pub fn target_affinity(&self, rate: f64) -> [[f64; 6]; 6] {
        let mixing = LeadMixing::for_group(self, &mut || 1.0);
        let hr = 0.5 * (self.heart_rate_bpm[0] + self.heart_rate_bpm[1]);
        let rr = 60.0 / hr;
        let n = (rr * rate).round() as usize;
        let leads: Vec<Vec<f64>> = CHEST_LEADS
            .map(|l| {
                (0..n)
                    .map(|i| {
                        let t = i as f64 / rate - 0.3 * rr;
                        mixing.beat(l, t, rr) + mixing.beat(l, t - rr, rr) + mixing.beat(l, t + rr, rr)
                    })
                    .collect()
            })
            .collect();
        let mut a = [[1.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                a[i][j] = pearson(&leads[i], &leads[j]);
            }
        }
        a
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::invalid("cohort needs at least one group"));
        }
        if !(self.source_rate >= self.preprocess.rate) {
            return Err(Error::invalid("source rate must be at least the target rate"));
        }
        if self.segments_per_subject == 0 {
            return Err(Error::invalid("segments_per_subject must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.baseline_wander >= 0.0 && self.amplitude_jitter >= 0.0) {
            return Err(Error::invalid("noise, wander and jitter must be non-negative"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            g.validate(i)?;
        }
        let p = self.groups[0].flag_rates.len();
        if self.groups.iter().any(|g| g.flag_rates.len() != p) {
            return Err(Error::invalid("all groups must declare the same number of flags"));
        }
        Ok(())
    }

    pub fn subject_count(&self) -> usize {
        self.groups.iter().map(|g| g.subjects).sum()
    }
}

/// Raw, unprocessed signals of one synthetic subject at the source rate.
#[derive(Debug, Clone)]
pub struct RawSubject {
    pub ecg: SignalSegment,
    pub ppg: SignalSegment,
    /// R-peak times in seconds from the start of the raw record.
    pub r_times: Vec<f64>,
    pub rr: f64,
    pub lead_gains: Vec<f64>,
    pub ppg_morphology: PpgMorphology,
    pub demographics: Demographics,
}

const MARGIN_S: f64 = 2.0;

/// Generates one subject's raw record: `MARGIN_S` seconds of lead-in and
/// lead-out around `core_seconds` of signal. R peaks fall on the target-rate
/// grid so that ground-truth indices are exact integers after resampling.
pub fn synth_subject(
    spec: &CohortSpec,
    group: usize,
    core_seconds: f64,
    subject_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<RawSubject> {
    let g = &spec.groups[group];
    let target = spec.preprocess.rate;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let jitter_sd = spec.amplitude_jitter;

    let hr = rng.random_range(g.heart_rate_bpm[0]..=g.heart_rate_bpm[1]);
    let rr = ((60.0 / hr) * target).round() / target;
    let phase = rng.random_range(0..(rr * target).round() as usize) as f64 / target;

    let mut jitter = || 1.0 + jitter_sd * normal.sample(rng);
    let mixing = LeadMixing::for_group(g, &mut jitter);
    let mut morph = g.ppg;
    morph.amplitude *= jitter();
    morph.diastolic_slope *= jitter();

    let total = core_seconds + 2.0 * MARGIN_S;
    let r_times: Vec<f64> = (-2..)
        .map(|k| phase + k as f64 * rr)
        .take_while(|&t| t < total + 1.0)
        .collect();

    let fs = spec.source_rate;
    let n = (total * fs).round() as usize;
    let wander_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut ecg = vec![vec![0.0; n]; 12];
    let mut ppg = vec![0.0; n];
    for i in 0..n {
        let t = i as f64 / fs;
        let wander = spec.baseline_wander * (std::f64::consts::TAU * 0.2 * t + wander_phase).sin();
        for &r in r_times.iter().filter(|&&r| (r - t).abs() < 1.2) {
            for (lead, ch) in ecg.iter_mut().enumerate() {
                ch[i] += mixing.beat(lead, t - r, rr);
            }
        }
        for &r in r_times.iter().filter(|&&r| t - r > -0.1 && t - r < rr + 0.1) {
            ppg[i] += ppg_pulse(t - r, &morph);
        }
        for ch in ecg.iter_mut() {
            ch[i] += wander + spec.noise_std * normal.sample(rng);
        }
        ppg[i] += 0.5 * wander + spec.noise_std * normal.sample(rng);
    }

    let demographics = Demographics {
        age: g.age[0] + g.age[1] * normal.sample(rng),
        sex: u8::from(rng.random_bool(g.male_fraction)),
        flags: g.flag_rates.iter().map(|&p| rng.random_bool(p)).collect(),
    };

    Ok(RawSubject {
        ecg: SignalSegment::new(ecg, fs, lead_names(), subject_id)?,
        ppg: SignalSegment::ppg(ppg, fs, subject_id)?,
        r_times,
        rr,
        lead_gains: mixing.weights.iter().map(|w| w[2]).collect(),
        ppg_morphology: morph,
        demographics,
    })
}

fn crop(signal: &SignalSegment, start: usize, len: usize) -> SignalSegment {
    let samples = signal.samples.iter().map(|c| c[start..start + len].to_vec()).collect();
    signal.with_samples(samples, signal.rate)
}

/// Deterministic synthetic cohort. Each subject contributes
/// `segments_per_subject` consecutive windows that went through the full
/// resample -> filter -> z-score -> segment chain.
pub fn synth_cohort(spec: &CohortSpec, seed: u64) -> Result<Vec<PairedRecord>> {
    spec.validate()?;
    let pre = &spec.preprocess;
    let w = (pre.rate * pre.window_seconds).round() as usize;
    let core_seconds = spec.segments_per_subject as f64 * pre.window_seconds;
    let core_len = spec.segments_per_subject * w;
    let margin = (MARGIN_S * pre.rate).round() as usize;

    let mut records = Vec::new();
    let mut subject_index = 0u64;
    for (gi, g) in spec.groups.iter().enumerate() {
        for si in 0..g.subjects {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(subject_index);
            subject_index += 1;
            let id = format!("g{gi}-s{si:03}");
            let raw = synth_subject(spec, gi, core_seconds, &id, &mut rng)?;

            let ecg = resample(&raw.ecg, pre.rate)?;
            let ecg = butterworth(&ecg, FilterMode::Highpass, pre.filter_order, &[pre.ecg_highpass_hz])?;
            let ecg = znorm(&crop(&ecg, margin, core_len))?;
            let ppg = resample(&raw.ppg, pre.rate)?;
            let ppg = butterworth(
                &ppg,
                FilterMode::Bandpass,
                pre.filter_order,
                &[pre.ppg_band_hz.0, pre.ppg_band_hz.1],
            )?;
            let ppg = znorm(&crop(&ppg, margin, core_len))?;

            let ecg_segs = segment(&ecg, pre.window_seconds)?;
            let ppg_segs = segment(&ppg, pre.window_seconds)?;
            for (k, (e, p)) in ecg_segs.into_iter().zip(ppg_segs).enumerate() {
                let start = (margin + k * w) as i64;
                let r_peaks = raw
                    .r_times
                    .iter()
                    .map(|t| (t * pre.rate).round() as i64 - start)
                    .filter(|&i| (0..w as i64).contains(&i))
                    .map(|i| i as usize)
                    .collect();
                let truth = Truth {
                    group: gi,
                    r_peaks,
                    lead_gains: raw.lead_gains.clone(),
                    ppg_amplitude: raw.ppg_morphology.amplitude,
                    ppg_delay: raw.ppg_morphology.delay_s,
                    ppg_diastolic_slope: raw.ppg_morphology.diastolic_slope,
                    heart_rate_bpm: 60.0 / raw.rr,
                };
                records.push(PairedRecord::new(p, e, raw.demographics.clone(), Some(truth))?);
            }
        }
    }
    Ok(records)
}

/// Subject-level split: `train_fraction` of subjects (rounded) go to the
/// first list. Subjects are shuffled per group and interleaved so both sides
/// see every group.
pub fn split_by_subject(
    records: &[PairedRecord],
    train_fraction: f64,
    seed: u64,
) -> (Vec<PairedRecord>, Vec<PairedRecord>) {
    use rand::seq::SliceRandom;
    let mut by_group: std::collections::BTreeMap<usize, Vec<String>> = Default::default();
    let mut seen = std::collections::HashSet::new();
    for r in records {
        let id = r.subject_id().to_string();
        if seen.insert(id.clone()) {
            let g = r.truth.as_ref().map_or(0, |t| t.group);
            by_group.entry(g).or_default().push(id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists: Vec<Vec<String>> = by_group.into_values().collect();
    for l in lists.iter_mut() {
        l.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(seen.len());
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for l in &lists {
            if let Some(id) = l.get(i) {
                order.push(id.clone());
            }
        }
    }
    let n_train = (order.len() as f64 * train_fraction).round() as usize;
    let train_ids: std::collections::HashSet<&str> =
        order[..n_train].iter().map(String::as_str).collect();
    records
        .iter()
        .cloned()
        .partition(|r| train_ids.contains(r.subject_id()))
}
