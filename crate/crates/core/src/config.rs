//! Run configuration: one JSON document holding every tunable of a
//! pipeline run. Missing fields take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_plan, linear_schedule, DdimPlan, DiffusionSchedule, BETA_END, BETA_START, DDIM_STEPS, X0_CLIP};
use crate::error::{Error, Result};
use crate::groupfinder::GroupFinderConfig;
use crate::model::denoiser::DenoiserConfig;
use crate::model::losses::LossWeights;
use crate::model::optim::OptimizerKind;
use crate::model::train::{Ablation, TrainConfig};
use crate::qrs::DEFAULT_HALF_WIDTH_MS;
use crate::signals::synth::{desk_cohort, CohortSpec};
use crate::spectral::BlurConfig;

pub const DATA_DIR_ENV: &str = "P2ES_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: BETA_START, beta_end: BETA_END }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub x0_clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: DDIM_STEPS, eta: 0.0, x0_clip: Some(X0_CLIP) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QrsConfig {
    pub half_width_ms: f64,
}

impl Default for QrsConfig {
    fn default() -> Self {
        Self { half_width_ms: DEFAULT_HALF_WIDTH_MS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            clip_norm: t.clip_norm,
            weights: t.weights,
            ablation: t.ablation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub d_k: usize,
    pub ppg_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self { channels: d.channels, d_k: d.d_k, ppg_hidden: d.ppg_hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub ddim: SamplerConfig,
    pub blur: BlurConfig,
    pub qrs: QrsConfig,
    pub groupfinder: GroupFinderConfig,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub cohort: CohortSpec,
    /// Fraction of subjects in the training split.
    pub train_fraction: f64,
    /// Artifact directory; `None` falls back to `P2ES_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            schedule: ScheduleConfig::default(),
            ddim: SamplerConfig::default(),
            blur: BlurConfig::default(),
            qrs: QrsConfig::default(),
            groupfinder: GroupFinderConfig::default(),
            training: TrainingConfig::default(),
            model: ModelConfig::default(),
            cohort: desk_cohort(),
            train_fraction: 0.8,
            data_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.plan()?;
        self.blur.validate(self.cohort.preprocess.rate)?;
        self.train_config().validate()?;
        self.denoiser_config().validate()?;
        self.cohort.validate()?;
        if !(self.qrs.half_width_ms > 0.0) {
            return Err(Error::invalid("QRS half-width must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn plan(&self) -> Result<DdimPlan> {
        let mut p = ddim_plan(self.schedule.steps, self.ddim.steps, self.ddim.eta)?;
        if let Some(c) = self.ddim.x0_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("x0_clip must be positive"));
            }
        }
        p.x0_clip = self.ddim.x0_clip;
        Ok(p)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            clip_norm: t.clip_norm,
            weights: t.weights,
            blur: self.blur.clone(),
            qrs_half_width_ms: self.qrs.half_width_ms,
            ablation: t.ablation,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let pre = &self.cohort.preprocess;
        DenoiserConfig {
            samples: (pre.rate * pre.window_seconds).round() as usize,
            channels: self.model.channels,
            d_k: self.model.d_k,
            ppg_hidden: self.model.ppg_hidden,
            steps: self.schedule.steps,
            ..DenoiserConfig::default()
        }
    }

    /// `data_dir`, else `$P2ES_DATA_DIR`, else `./data`.
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}
