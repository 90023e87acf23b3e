//! Splitting a dataset into client shards.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModalSample};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Seeded shuffle, then near-equal contiguous splits.
    #[default]
    Uniform,
    /// Sort by target, cut into `2K` shards, deal two shards per client.
    LabelSortedShards,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// 1-based.
    pub client_id: usize,
    pub train: Vec<ModalSample>,
    pub test: Vec<ModalSample>,
    /// `|D_i| / Σ_j |D_j|` over training sizes.
    pub weight: f64,
}

/// Split sizes of `n` items into `k` near-equal parts, larger parts first.
pub fn split_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn uniform_groups(n: usize, k: usize, seed: u64, split: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::PARTITION, split]));
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for len in split_sizes(n, k) {
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Contiguous shards of the target-sorted order, dealt by `deal`.
fn shard_groups(samples: &[ModalSample], k: usize, deal: &[usize]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[a].target.total_cmp(&samples[b].target).then(a.cmp(&b)));
    let mut shards = Vec::with_capacity(2 * k);
    let mut start = 0;
    for len in split_sizes(samples.len(), 2 * k) {
        shards.push(&idx[start..start + len]);
        start += len;
    }
    (0..k)
        .map(|c| {
            let mut g = shards[deal[2 * c]].to_vec();
            g.extend_from_slice(shards[deal[2 * c + 1]]);
            g
        })
        .collect()
}

fn take(samples: Vec<ModalSample>, groups: &[Vec<usize>]) -> Vec<Vec<ModalSample>> {
    let mut slots: Vec<Option<ModalSample>> = samples.into_iter().map(Some).collect();
    groups
        .iter()
        .map(|g| g.iter().map(|&i| slots[i].take().expect("disjoint groups")).collect())
        .collect()
}

/// Partitions train and test splits across `k` clients. Shard dealing uses
/// the same shard-to-client assignment for both splits, so each client's
/// test data follows its training distribution.
pub fn partition_clients(
    dataset: Dataset,
    k: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let min_needed = match scheme {
        PartitionScheme::Uniform => k,
        PartitionScheme::LabelSortedShards => 2 * k,
    };
    if dataset.train.len() < min_needed || dataset.test.len() < min_needed {
        return Err(Error::Config(format!(
            "{k} clients need at least {min_needed} train and test samples, have {} / {}",
            dataset.train.len(),
            dataset.test.len()
        )));
    }
    let (train_groups, test_groups) = match scheme {
        PartitionScheme::Uniform => (
            uniform_groups(dataset.train.len(), k, seed, 0),
            uniform_groups(dataset.test.len(), k, seed, 1),
        ),
        PartitionScheme::LabelSortedShards => {
            let mut deal: Vec<usize> = (0..2 * k).collect();
            deal.shuffle(&mut rng::stream(seed, &[tag::PARTITION, 2]));
            (
                shard_groups(&dataset.train, k, &deal),
                shard_groups(&dataset.test, k, &deal),
            )
        }
    };
    let total = dataset.train.len() as f64;
    let trains = take(dataset.train, &train_groups);
    let tests = take(dataset.test, &test_groups);
    Ok(trains
        .into_iter()
        .zip(tests)
        .enumerate()
        .map(|(i, (train, test))| ClientDataset {
            client_id: i + 1,
            weight: train.len() as f64 / total,
            train,
            test,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Standardizer;
    use crate::tensor::Tensor;

    fn toy(n_train: usize, n_test: usize) -> Dataset {
        let s = |i: usize| ModalSample::new(vec![("v".into(), Tensor::vector(vec![i as f64]))], i as f64);
        Dataset {
            train: (0..n_train).map(s).collect(),
            test: (n_train..n_train + n_test).map(s).collect(),
            target_scale: Standardizer::identity(),
        }
    }

    #[test]
    fn uniform_sizes_and_weights() {
        let clients = partition_clients(toy(2000, 500), 3, PartitionScheme::Uniform, 1).unwrap();
        let sizes: Vec<_> = clients.iter().map(|c| c.train.len()).collect();
        assert_eq!(sizes, vec![667, 667, 666]);
        for c in &clients {
            assert!((c.weight - c.train.len() as f64 / 2000.0).abs() < 1e-12);
        }
        let total: f64 = clients.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_client_owns_everything() {
        let clients = partition_clients(toy(10, 4), 1, PartitionScheme::Uniform, 3).unwrap();
        assert_eq!(clients.len(), 1);
        assert_eq!(clients[0].weight, 1.0);
        assert_eq!(clients[0].train.len(), 10);
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(
            partition_clients(toy(2, 2), 3, PartitionScheme::Uniform, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shards_are_disjoint_and_cover() {
        let clients =
            partition_clients(toy(40, 20), 3, PartitionScheme::LabelSortedShards, 9).unwrap();
        let mut seen: Vec<f64> = clients
            .iter()
            .flat_map(|c| c.train.iter().chain(&c.test).map(|s| s.target))
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..60).map(|i| i as f64).collect::<Vec<_>>());
    }
}
