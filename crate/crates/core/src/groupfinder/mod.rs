//! Demographic-aware clustering of chest-lead affinity and contrastive
//! assignment of PPG windows to clusters.

pub mod affinity;
pub mod cluster;
pub mod encoders;
pub mod features;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{PairedRecord, SignalSegment};

pub use affinity::{
    affinity_matrix, flatten_upper, joint_feature, pearson_matrix, reshape_upper, subject_feature,
    AffinityMatrix, UPPER_LEN,
};
pub use cluster::{fit_clusters, kmeans, permutation_accuracy, silhouette, ClusterConfig, ClusterModel, Scaler};
pub use encoders::{
    assign_embedding, assign_features, contrastive_loss, train_encoders, Assignment, EncoderConfig,
    EncoderHistory, EncoderParams,
};
pub use features::{ppg_features, systolic_peaks, PpgFeatures};

/// Fitted clustering plus trained encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFinder {
    pub clusters: ClusterModel,
    pub encoders: EncoderParams,
    /// Subject id -> cluster label for the subjects seen during fitting.
    pub subject_labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupFinderConfig {
    pub clusters: ClusterConfig,
    pub encoders: EncoderConfig,
}

/// Records grouped by subject in first-seen order.
pub fn by_subject(records: &[PairedRecord]) -> Vec<(String, Vec<&PairedRecord>)> {
    let mut out: Vec<(String, Vec<&PairedRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(id, _)| id == r.subject_id()) {
            Some((_, v)) => v.push(r),
            None => out.push((r.subject_id().to_string(), vec![r])),
        }
    }
    out
}

/// PPG-only features of one window.
pub fn window_features(ppg: &SignalSegment) -> Result<[f64; 3]> {
    Ok(ppg_features(ppg.channel(0), ppg.rate, None)?.to_array())
}

impl GroupFinder {
    /// Clusters subjects on joint features, then trains the encoders on
    /// every window whose PPG features can be extracted.
    pub fn fit(records: &[PairedRecord], cfg: &GroupFinderConfig, seed: u64) -> Result<Self> {
        let subjects = by_subject(records);
        let features = subjects
            .iter()
            .map(|(_, recs)| {
                let ecgs: Vec<&SignalSegment> = recs.iter().map(|r| &r.ecg).collect();
                subject_feature(&ecgs, &recs[0].demographics)
            })
            .collect::<Result<Vec<_>>>()?;
        let clusters = fit_clusters(&features, &cfg.clusters, seed)?;
        let subject_labels: BTreeMap<String, usize> =
            subjects.iter().map(|(id, _)| id.clone()).zip(clusters.labels.iter().copied()).collect();

        let mut ppg = Vec::new();
        let mut labels = Vec::new();
        for r in records {
            match window_features(&r.ppg) {
                Ok(f) => {
                    ppg.push(f);
                    labels.push(subject_labels[r.subject_id()]);
                }
                Err(e) => log::warn!("{}: skipping window for encoder training: {e}", r.subject_id()),
            }
        }
        if ppg.is_empty() {
            return Err(Error::NoPeaks("no PPG window yielded features".into()));
        }
        let (encoders, _) = train_encoders(&ppg, &labels, &clusters, &cfg.encoders, seed)?;
        Ok(Self { clusters, encoders, subject_labels })
    }

    pub fn assign(&self, ppg: &SignalSegment) -> Result<Assignment> {
        assign_features(&window_features(ppg)?, &self.encoders, &self.clusters)
    }

    /// Upper-triangle affinity of centroid `k`.
    pub fn centroid_affinity(&self, k: usize) -> [f64; UPPER_LEN] {
        let mut out = [0.0; UPPER_LEN];
        out.copy_from_slice(&self.clusters.centroids[k][..UPPER_LEN]);
        out
    }
}
