//! Samples, datasets and client shards: synthetic tri-modal generation, NIR
//! CSV ingestion, standardization and partitioning.

pub mod nir;
pub mod partition;
pub mod snapshot;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use nir::{load_nir_csv, NirSchema};
pub use partition::{partition_clients, ClientDataset, PartitionScheme};
pub use synthetic::{generate, link1, link2, link3, stride_stats, stride_sum, Link, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalSample {
    pub modalities: BTreeMap<String, Tensor>,
    pub target: f64,
}

impl ModalSample {
    pub fn new(modalities: Vec<(String, Tensor)>, target: f64) -> Self {
        ModalSample {
            modalities: modalities.into_iter().collect(),
            target,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.modalities.get(name)
    }
}

/// One modality of a minibatch: `size` samples of `sample_shape`, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub name: String,
    pub sample_shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub modalities: Vec<ModalityBatch>,
    pub targets: Vec<f64>,
    /// Positions of the batch rows in the source sample list.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Stacks `samples[idx]` for the named modalities.
    pub fn gather(samples: &[ModalSample], idx: &[usize], names: &[&str]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::domain("batch", "no samples"));
        }
        let mut modalities = Vec::with_capacity(names.len());
        for &name in names {
            let first = samples[idx[0]]
                .get(name)
                .ok_or_else(|| Error::MissingModality(name.to_string()))?;
            let shape = first.shape().to_vec();
            let mut data = Vec::with_capacity(idx.len() * first.len());
            for &i in idx {
                let t = samples[i]
                    .get(name)
                    .ok_or_else(|| Error::MissingModality(name.to_string()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::dim("batch", t.shape(), &shape));
                }
                data.extend_from_slice(t.data());
            }
            modalities.push(ModalityBatch {
                name: name.to_string(),
                sample_shape: shape,
                data,
            });
        }
        Ok(Batch {
            size: idx.len(),
            modalities,
            targets: idx.iter().map(|&i| samples[i].target).collect(),
            indices: idx.to_vec(),
        })
    }

    pub fn modality(&self, name: &str) -> Option<&ModalityBatch> {
        self.modalities.iter().find(|m| m.name == name)
    }
}

/// Affine scaling `(x - mean) / std`, with the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Fits on `values`; a zero spread falls back to unit scale.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("standardize", "no values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Standardizer { mean, std })
    }

    pub fn identity() -> Self {
        Standardizer { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// A train/test split with the target scaling fitted on the training part.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ModalSample>,
    pub test: Vec<ModalSample>,
    pub target_scale: Standardizer,
}

impl Dataset {
    /// Standardizes targets of both splits with training-split statistics.
    pub fn standardize_targets(mut self) -> Result<Self> {
        let ys: Vec<f64> = self.train.iter().map(|s| s.target).collect();
        let sc = Standardizer::fit(&ys)?;
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.target = sc.apply(s.target);
        }
        self.target_scale = sc;
        Ok(self)
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.train
            .first()
            .map(|s| s.modalities.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// SHA-256 over every value and target in split order, hex encoded.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.train.iter().chain(&self.test))
    }
}

pub fn fingerprint<'a>(samples: impl IntoIterator<Item = &'a ModalSample>) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for (name, t) in &s.modalities {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(s.target.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_roundtrip() {
        let sc = Standardizer::fit(&[1.0, 4.0, -2.5, 7.25]).unwrap();
        for x in [-1e3, -3.3, 0.0, 5.5, 1e4] {
            assert!((sc.invert(sc.apply(x)) - x).abs() < 1e-10);
        }
    }

    #[test]
    fn gather_stacks_in_order() {
        let s = |v: f64| ModalSample::new(vec![("a".into(), Tensor::vector(vec![v, v + 1.0]))], v);
        let samples = vec![s(0.0), s(10.0), s(20.0)];
        let b = Batch::gather(&samples, &[2, 0], &["a"]).unwrap();
        assert_eq!(b.modality("a").unwrap().data, vec![20.0, 21.0, 0.0, 1.0]);
        assert_eq!(b.targets, vec![20.0, 0.0]);
        assert!(matches!(
            Batch::gather(&samples, &[0], &["b"]),
            Err(Error::MissingModality(_))
        ));
    }
}
