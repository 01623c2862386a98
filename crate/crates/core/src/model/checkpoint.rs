//! `P2ESCKPT` container: JSON manifest plus little-endian f32 payload.
//! The byte layout is documented in `docs/formats.md`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::groupfinder::GroupFinder;

use super::denoiser::{Denoiser, DenoiserConfig};
use super::params::{ParamEntry, ParamStore};
use super::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"P2ESCKPT";
pub const VERSION: u32 = 1;

/// Everything inference needs: the denoiser, its schedule, the group
/// finder and the training switches.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub finder: GroupFinder,
    pub train: TrainConfig,
    pub rate: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    denoiser: DenoiserConfig,
    entries: Vec<ParamEntry>,
    schedule: DiffusionSchedule,
    finder: GroupFinder,
    train: TrainConfig,
    rate: f64,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            denoiser: self.denoiser.cfg.clone(),
            entries: self.denoiser.store.entries().to_vec(),
            schedule: self.schedule.clone(),
            finder: self.finder.clone(),
            train: self.train.clone(),
            rate: self.rate,
        };
        let json = serde_json::to_vec(&manifest)?;
        let values = self.denoiser.store.values();
        let mut out = Vec::with_capacity(24 + json.len() + 4 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::format("checkpoint truncated before magic"))?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() < len {
            return Err(Error::format("checkpoint manifest truncated"));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() != 4 * count {
            return Err(Error::format(format!("payload holds {} bytes, expected {}", r.len(), 4 * count)));
        }
        let values: Vec<f64> =
            r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let store = ParamStore::from_parts(manifest.entries, values)?;
        let denoiser = Denoiser::from_store(manifest.denoiser, store)?;
        if denoiser.cfg.steps != manifest.schedule.steps {
            return Err(Error::format("denoiser and schedule disagree on T"));
        }
        Ok(Self {
            denoiser,
            schedule: manifest.schedule,
            finder: manifest.finder,
            train: manifest.train,
            rate: manifest.rate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Same checkpoint with parameters rounded through f32, as a reload
    /// would see them.
    pub fn rounded(&self) -> Self {
        let mut c = self.clone();
        for v in c.denoiser.store.values_mut() {
            *v = *v as f32 as f64;
        }
        c
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::format("checkpoint truncated"))?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use crate::groupfinder::GroupFinderConfig;
    use crate::signals::synth::{synth_cohort, CohortSpec};

    fn checkpoint() -> Checkpoint {
        let spec = CohortSpec { segments_per_subject: 1, ..CohortSpec::default() };
        let cohort = synth_cohort(&spec, 5).unwrap();
        let cfg = GroupFinderConfig {
            encoders: crate::groupfinder::EncoderConfig { epochs: 5, ..Default::default() },
            ..Default::default()
        };
        Checkpoint {
            denoiser: Denoiser::new(&DenoiserConfig::with_steps(20), 1).unwrap(),
            schedule: linear_schedule(20, 1e-4, 0.2).unwrap(),
            finder: GroupFinder::fit(&cohort, &cfg, 1).unwrap(),
            train: TrainConfig::default(),
            rate: 125.0,
        }
    }

    #[test]
    fn round_trip_through_f32() {
        let c = checkpoint();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..8], b"P2ESCKPT");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c.rounded());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = checkpoint().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..6]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
    }
}
