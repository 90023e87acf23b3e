//! Federated training: broadcast, local updates, sample-weighted averaging
//! and the per-client history of past global models.

mod local;
mod training;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use local::{compute_anchor_representations, local_update, LocalResult, StepLog};
pub use training::{
    run_training, write_drift_csv, write_metrics_csv, write_step_log, MetricRow, RoundMetrics,
    Split, TrainOptions, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::model::GlobalModel;

fn default_rounds() -> usize {
    5
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clients() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Zero is accepted and makes every local update a no-op.
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: default_rounds(),
            local_epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            clients: default_clients(),
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.clients == 0 {
            return Err(Error::Config("batch_size and clients must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One stored global model plus its fused representations of this client's
/// training samples (`[n×d]`, row-major).
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub model: Arc<GlobalModel>,
    pub representations: Arc<Vec<f64>>,
}

/// Newest-first FIFO of past global models, holding at most `capacity`.
#[derive(Debug, Clone)]
pub struct RepresentationHistory {
    capacity: usize,
    snapshots: VecDeque<Snapshot>,
}

impl RepresentationHistory {
    pub fn new(capacity: usize) -> Self {
        RepresentationHistory {
            capacity: capacity.max(1),
            snapshots: VecDeque::new(),
        }
    }

    /// History for `R` negatives: one positive plus `R` older entries.
    pub fn for_negatives(r: usize) -> Self {
        Self::new(r + 1)
    }

    pub fn push(&mut self, snapshot: Snapshot) {
        self.snapshots.push_front(snapshot);
        self.snapshots.truncate(self.capacity);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn newest(&self) -> Option<&Snapshot> {
        self.snapshots.front()
    }

    /// Entries older than the newest.
    pub fn older(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter().skip(1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter()
    }
}

/// `|D_i| / Σ_j |D_j|`.
pub fn aggregation_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config("every client needs at least one training sample".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Deep copies of `global` for each client.
pub fn broadcast(global: &GlobalModel, clients: usize) -> Vec<GlobalModel> {
    (0..clients).map(|_| global.clone()).collect()
}

/// Parameter-wise weighted average, summed in client order. Entries on
/// which every update agrees are copied unchanged, so identical updates
/// aggregate to themselves bitwise. Equal weights take the plain sum over K.
pub fn aggregate(updates: &[GlobalModel], weights: &[f64]) -> Result<GlobalModel> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Consistency("no updates to aggregate".into()))?;
    if updates.len() != weights.len() {
        return Err(Error::Consistency(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(GlobalModel::flatten).collect();
    let n = flats[0].len();
    for (i, f) in flats.iter().enumerate() {
        if f.len() != n || updates[i].config != first.config {
            return Err(Error::Consistency(format!(
                "client {} has {} parameters, expected {n}",
                i + 1,
                f.len()
            )));
        }
    }
    let equal = weights.iter().all(|w| *w == weights[0]);
    let k_clients = flats.len() as f64;
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let v0 = flats[0][k];
        if flats.iter().all(|f| f[k] == v0) {
            *o = v0;
        } else if equal {
            *o = flats.iter().map(|f| f[k]).sum::<f64>() / k_clients;
        } else {
            *o = flats.iter().zip(weights).map(|(f, w)| w * f[k]).sum();
        }
    }
    let mut model = first.clone();
    model.load_flat(&out)?;
    Ok(model)
}

/// `‖a − b‖₂` over flattened parameters.
pub fn param_distance(a: &GlobalModel, b: &GlobalModel) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
