//! Signal containers and the preprocessing chain (resample, filter,
//! normalize, segment), plus the synthetic paired-cohort generator and
//! on-disk formats.

mod filter;
pub mod io;
mod resample;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{butterworth, Butterworth, FilterMode, Sos};
pub use resample::{resample, CubicSpline};

/// Target sampling rate of every processed segment.
pub const DEFAULT_RATE: f64 = 125.0;
/// Window length of a processed segment.
pub const DEFAULT_WINDOW_SECONDS: f64 = 2.0;

/// Canonical 12-lead order.
pub const LEAD_NAMES: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];
pub const LIMB_LEADS: std::ops::Range<usize> = 0..6;
pub const CHEST_LEADS: std::ops::Range<usize> = 6..12;
pub const LEAD_I: usize = 0;
pub const LEAD_II: usize = 1;
pub const PPG_NAME: &str = "PPG";

/// A fixed-rate multi-channel window. `samples[c][n]` is channel `c` at
/// sample `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSegment {
    pub samples: Vec<Vec<f64>>,
    pub rate: f64,
    pub channel_names: Vec<String>,
    pub subject_id: String,
    pub window_seconds: f64,
}

impl SignalSegment {
    /// Builds a segment and checks the container invariants: channel count
    /// in {1, 6, 12}, equal channel lengths, finite samples and canonical
    /// lead order for 6- and 12-channel data.
    pub fn new(
        samples: Vec<Vec<f64>>,
        rate: f64,
        channel_names: Vec<String>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid(format!("rate must be positive, got {rate}")));
        }
        if samples.len() != channel_names.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channel names", samples.len()),
                got: format!("{}", channel_names.len()),
            });
        }
        check_channel_names(&channel_names)?;
        let n = samples.first().map_or(0, Vec::len);
        for (name, ch) in channel_names.iter().zip(&samples) {
            if ch.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} samples"),
                    got: format!("{} samples in channel {name}", ch.len()),
                });
            }
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite sample at {name}[{i}]")));
            }
        }
        Ok(Self {
            window_seconds: n as f64 / rate,
            samples,
            rate,
            channel_names,
            subject_id: subject_id.into(),
        })
    }

    pub fn ppg(samples: Vec<f64>, rate: f64, subject_id: impl Into<String>) -> Result<Self> {
        Self::new(vec![samples], rate, vec![PPG_NAME.to_string()], subject_id)
    }

    pub fn ecg12(samples: Vec<Vec<f64>>, rate: f64, subject_id: impl Into<String>) -> Result<Self> {
        Self::new(samples, rate, lead_names(), subject_id)
    }

    /// Chest leads V1..V6 of a 12-lead segment as a 6-channel segment.
    pub fn chest(&self) -> Result<Self> {
        if self.channels() != 12 {
            return Err(Error::invalid("chest leads require a 12-lead segment"));
        }
        Self::new(
            self.samples[CHEST_LEADS].to_vec(),
            self.rate,
            self.channel_names[CHEST_LEADS].to_vec(),
            self.subject_id.clone(),
        )
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c]
    }

    /// Same metadata, new samples. Channel count and names are kept.
    pub(crate) fn with_samples(&self, samples: Vec<Vec<f64>>, rate: f64) -> Self {
        let n = samples.first().map_or(0, Vec::len);
        Self {
            window_seconds: n as f64 / rate,
            samples,
            rate,
            channel_names: self.channel_names.clone(),
            subject_id: self.subject_id.clone(),
        }
    }
}

pub fn lead_names() -> Vec<String> {
    LEAD_NAMES.iter().map(|s| s.to_string()).collect()
}

fn check_channel_names(names: &[String]) -> Result<()> {
    let expected: &[&str] = match names.len() {
        1 => return Ok(()),
        6 => &LEAD_NAMES[CHEST_LEADS],
        12 => &LEAD_NAMES,
        n => {
            return Err(Error::invalid(format!(
                "channel count must be 1, 6 or 12, got {n}"
            )))
        }
    };
    for (got, want) in names.iter().zip(expected) {
        if got != want {
            return Err(Error::format(format!(
                "expected lead {want} in canonical position, found {got}"
            )));
        }
    }
    Ok(())
}

/// Demographic attributes. Encoded as `[age, sex, flags...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    pub sex: u8,
    pub flags: Vec<bool>,
}

impl Demographics {
    pub fn dim(&self) -> usize {
        2 + self.flags.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.age);
        v.push(f64::from(self.sex));
        v.extend(self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        v
    }
}

/// Generator ground truth carried by synthetic records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub group: usize,
    /// R-peak sample indices inside the segment.
    pub r_peaks: Vec<usize>,
    /// Programmed per-lead QRS amplitude scaling, canonical lead order.
    pub lead_gains: Vec<f64>,
    /// Programmed systolic amplitude (raw units, before normalization).
    pub ppg_amplitude: f64,
    /// Programmed R-to-systolic-peak delay in seconds.
    pub ppg_delay: f64,
    /// Programmed diastolic slope (raw units per second, negative).
    pub ppg_diastolic_slope: f64,
    pub heart_rate_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub ppg: SignalSegment,
    pub ecg: SignalSegment,
    pub demographics: Demographics,
    pub truth: Option<Truth>,
}

impl PairedRecord {
    pub fn new(
        ppg: SignalSegment,
        ecg: SignalSegment,
        demographics: Demographics,
        truth: Option<Truth>,
    ) -> Result<Self> {
        if ppg.channels() != 1 || ecg.channels() != 12 {
            return Err(Error::invalid("paired record needs 1 PPG and 12 ECG channels"));
        }
        if ppg.rate != ecg.rate || ppg.len() != ecg.len() {
            return Err(Error::invalid("PPG and ECG must share rate and time span"));
        }
        Ok(Self { ppg, ecg, demographics, truth })
    }

    pub fn subject_id(&self) -> &str {
        &self.ecg.subject_id
    }
}

/// Per-channel z-score. Fails on a zero-variance channel.
pub fn znorm(signal: &SignalSegment) -> Result<SignalSegment> {
    let mut out = Vec::with_capacity(signal.channels());
    for (name, ch) in signal.channel_names.iter().zip(&signal.samples) {
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::DegenerateChannel { channel: name.clone() });
        }
        out.push(ch.iter().map(|v| (v - mean) / sd).collect());
    }
    Ok(signal.with_samples(out, signal.rate))
}

/// Non-overlapping windows of `round(rate * window_seconds)` samples; the
/// trailing remainder is dropped.
pub fn segment(record: &SignalSegment, window_seconds: f64) -> Result<Vec<SignalSegment>> {
    if !(window_seconds > 0.0) {
        return Err(Error::invalid("window_seconds must be positive"));
    }
    let w = (record.rate * window_seconds).round() as usize;
    if w == 0 {
        return Err(Error::invalid("window shorter than one sample"));
    }
    let count = record.len() / w;
    Ok((0..count)
        .map(|k| {
            let samples = record
                .samples
                .iter()
                .map(|ch| ch[k * w..(k + 1) * w].to_vec())
                .collect();
            record.with_samples(samples, record.rate)
        })
        .collect())
}

/// Concatenates segments of one subject along time.
pub fn concat(segments: &[SignalSegment]) -> Result<SignalSegment> {
    let first = segments
        .first()
        .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    let mut samples = vec![Vec::new(); first.channels()];
    for s in segments {
        if s.channels() != first.channels() || s.rate != first.rate {
            return Err(Error::invalid("segments differ in channels or rate"));
        }
        for (dst, src) in samples.iter_mut().zip(&s.samples) {
            dst.extend_from_slice(src);
        }
    }
    Ok(first.with_samples(samples, first.rate))
}

/// Which filter the preprocessing chain applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// 0.5 Hz 4th-order highpass.
    Ecg,
    /// 0.5-8 Hz bandpass.
    Ppg,
}

/// Fixed chain: resample -> filter -> z-score -> segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub rate: f64,
    pub window_seconds: f64,
    pub filter_order: usize,
    pub ecg_highpass_hz: f64,
    pub ppg_band_hz: (f64, f64),
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self {
            rate: DEFAULT_RATE,
            window_seconds: DEFAULT_WINDOW_SECONDS,
            filter_order: 4,
            ecg_highpass_hz: 0.5,
            ppg_band_hz: (0.5, 8.0),
        }
    }
}

impl Preprocessor {
    /// Resample, filter and normalize a whole record (no segmentation).
    pub fn condition(&self, record: &SignalSegment, modality: Modality) -> Result<SignalSegment> {
        let resampled = resample(record, self.rate)?;
        let filtered = match modality {
            Modality::Ecg => butterworth(
                &resampled,
                FilterMode::Highpass,
                self.filter_order,
                &[self.ecg_highpass_hz],
            )?,
            Modality::Ppg => butterworth(
                &resampled,
                FilterMode::Bandpass,
                self.filter_order,
                &[self.ppg_band_hz.0, self.ppg_band_hz.1],
            )?,
        };
        znorm(&filtered)
    }

    pub fn run(&self, record: &SignalSegment, modality: Modality) -> Result<Vec<SignalSegment>> {
        segment(&self.condition(record, modality)?, self.window_seconds)
    }
}
