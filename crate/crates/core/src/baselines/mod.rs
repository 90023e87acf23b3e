//! Linear per-modality reducers (PCA, truncated SVD, Gaussian random
//! projection) and the reduce-then-regress pipeline that trains the shared
//! head on their concatenated outputs.

pub mod svd;

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientDataset, ModalSample};
use crate::error::{Error, Result};
use crate::fedsim::{run_training, RoundConfig, TrainOptions, TrainOutcome};
use crate::losses::LossWeights;
use crate::model::{EncoderConfig, FusionMode, ModalityConfig, ModelConfig};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Inputs whose smaller side exceeds this use the randomized solver.
pub const EXACT_SVD_LIMIT: usize = 512;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 7;

pub const REDUCED: &str = "reduced";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    Pca,
    Tsvd,
    Rp,
}

impl ReducerKind {
    pub fn name(self) -> &'static str {
        match self {
            ReducerKind::Pca => "pca",
            ReducerKind::Tsvd => "tsvd",
            ReducerKind::Rp => "rp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearReducer {
    pub kind: ReducerKind,
    /// `[d_in×d]`.
    pub projection: Tensor,
    /// Column means, PCA only.
    pub center: Option<Tensor>,
}

fn check_fit(n: usize, d_in: usize, x: &[f64], d: usize) -> Result<()> {
    if x.len() != n * d_in {
        return Err(Error::dim("fit", &[n, d_in], &[x.len()]));
    }
    if n < 2 {
        return Err(Error::Config("reducer fit needs at least 2 rows".into()));
    }
    if d == 0 || d > n.min(d_in) {
        return Err(Error::Config(format!(
            "target dim {d} must lie in 1..={} for a {n}x{d_in} input",
            n.min(d_in)
        )));
    }
    Ok(())
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_signs(d_in: usize, d: usize, p: &mut [f64]) {
    for k in 0..d {
        let mut best = 0.0f64;
        for i in 0..d_in {
            let v = p[i * d + k];
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            for i in 0..d_in {
                p[i * d + k] = -p[i * d + k];
            }
        }
    }
}

/// Top `d` right singular vectors of `x` as a `d_in×d` matrix.
fn top_right_vectors(n: usize, d_in: usize, x: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut p = if n.min(d_in) <= EXACT_SVD_LIMIT {
        let s = svd::jacobi_svd(n, d_in, x)?;
        let mut p = vec![0.0; d_in * d];
        for i in 0..d_in {
            p[i * d..(i + 1) * d].copy_from_slice(&s.v[i * s.rank..i * s.rank + d]);
        }
        p
    } else {
        svd::randomized_top(n, d_in, x, d, OVERSAMPLE, POWER_ITERS)?.0
    };
    fix_signs(d_in, d, &mut p);
    Ok(p)
}

/// Principal axes of the centered rows of `x` (`n×d_in`).
pub fn fit_pca(x: &[f64], n: usize, d_in: usize, d: usize) -> Result<LinearReducer> {
    check_fit(n, d_in, x, d)?;
    let mut mean = vec![0.0; d_in];
    for row in x.chunks(d_in) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x
        .chunks(d_in)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let p = top_right_vectors(n, d_in, &centered, d)?;
    Ok(LinearReducer {
        kind: ReducerKind::Pca,
        projection: Tensor::new(vec![d_in, d], p)?,
        center: Some(Tensor::vector(mean)),
    })
}

/// Leading right singular vectors of the uncentered `x`.
pub fn fit_tsvd(x: &[f64], n: usize, d_in: usize, d: usize) -> Result<LinearReducer> {
    check_fit(n, d_in, x, d)?;
    let p = top_right_vectors(n, d_in, x, d)?;
    Ok(LinearReducer {
        kind: ReducerKind::Tsvd,
        projection: Tensor::new(vec![d_in, d], p)?,
        center: None,
    })
}

/// Entries i.i.d. `N(0, 1/d)`.
pub fn fit_rp(d_in: usize, d: usize, seed: u64) -> Result<LinearReducer> {
    if d == 0 || d_in == 0 {
        return Err(Error::Config("projection dims must be positive".into()));
    }
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).map_err(|e| Error::domain("fit_rp", e.to_string()))?;
    let mut r = rng::stream(seed, &[tag::PROJECTION, d_in as u64, d as u64]);
    let data = (0..d_in * d).map(|_| normal.sample(&mut r)).collect();
    Ok(LinearReducer {
        kind: ReducerKind::Rp,
        projection: Tensor::new(vec![d_in, d], data)?,
        center: None,
    })
}

impl LinearReducer {
    pub fn fit(kind: ReducerKind, x: &[f64], n: usize, d_in: usize, d: usize, seed: u64) -> Result<Self> {
        match kind {
            ReducerKind::Pca => fit_pca(x, n, d_in, d),
            ReducerKind::Tsvd => fit_tsvd(x, n, d_in, d),
            ReducerKind::Rp => fit_rp(d_in, d, seed),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// `(x − center)ᵀ P` for one flattened input.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d_in, d) = (self.input_dim(), self.output_dim());
        if x.len() != d_in {
            return Err(Error::dim("transform", &[d_in], &[x.len()]));
        }
        let p = self.projection.data();
        let mut out = vec![0.0; d];
        for i in 0..d_in {
            let xi = match &self.center {
                Some(c) => x[i] - c.data()[i],
                None => x[i],
            };
            for (o, w) in out.iter_mut().zip(&p[i * d..(i + 1) * d]) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    pub fn transform_rows(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for row in x.chunks(self.input_dim()) {
            out.extend(self.transform(row)?);
        }
        Ok(out)
    }
}

const MAGIC: &[u8; 8] = b"FDRMRDCR";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ReducerKind,
    input_dim: usize,
    output_dim: usize,
    centered: bool,
}

/// Magic, `u32` version, `u64` header length, JSON header, then the
/// projection and optional center as little-endian `f64`.
pub fn reducer_to_bytes(r: &LinearReducer) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        kind: r.kind,
        input_dim: r.input_dim(),
        output_dim: r.output_dim(),
        centered: r.center.is_some(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let center = r.center.as_ref().map(|c| c.data()).unwrap_or(&[]);
    for v in r.projection.data().iter().chain(center) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn reducer_from_bytes(buf: &[u8]) -> Result<LinearReducer> {
    let bad = |m: &str| Error::Validation(format!("reducer snapshot: {m}"));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) != VERSION {
        return Err(bad("unsupported version"));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated"))?;
    let h: Header = serde_json::from_slice(&buf[20..body_start])?;
    let np = h.input_dim * h.output_dim;
    let nc = if h.centered { h.input_dim } else { 0 };
    let body = &buf[body_start..];
    if body.len() != 8 * (np + nc) {
        return Err(bad("payload length mismatch"));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(LinearReducer {
        kind: h.kind,
        projection: Tensor::new(vec![h.input_dim, h.output_dim], vals[..np].to_vec())?,
        center: h.centered.then(|| Tensor::vector(vals[np..].to_vec())),
    })
}

pub fn save_reducer(r: &LinearReducer, path: &Path) -> Result<()> {
    fs::write(path, reducer_to_bytes(r)?).map_err(|e| Error::io(path, e))
}

pub fn load_reducer(path: &Path) -> Result<LinearReducer> {
    reducer_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One reducer per modality, in sorted modality-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducerSet {
    pub modalities: Vec<(String, LinearReducer)>,
}

impl ReducerSet {
    /// Fits on the union of the clients' training rows. The per-modality
    /// width is `min(d, d_in, n)`, since no linear reducer can add rank.
    pub fn fit(clients: &[ClientDataset], kind: ReducerKind, d: usize, seed: u64) -> Result<Self> {
        let pooled: Vec<&ModalSample> = clients.iter().flat_map(|c| &c.train).collect();
        let first = pooled
            .first()
            .ok_or_else(|| Error::Config("no training rows to fit reducers on".into()))?;
        let n = pooled.len();
        let mut modalities = Vec::new();
        for (name, t) in &first.modalities {
            let d_in = t.len();
            let mut x = Vec::with_capacity(n * d_in);
            for s in &pooled {
                let v = s
                    .get(name)
                    .ok_or_else(|| Error::MissingModality(name.clone()))?;
                if v.len() != d_in {
                    return Err(Error::dim("reducer fit", &[d_in], &[v.len()]));
                }
                x.extend_from_slice(v.data());
            }
            let dm = d.min(d_in).min(n);
            let r = LinearReducer::fit(kind, &x, n, d_in, dm, rng::derive_seed(seed, &[modalities.len() as u64]))?;
            modalities.push((name.clone(), r));
        }
        Ok(ReducerSet { modalities })
    }

    pub fn output_dim(&self) -> usize {
        self.modalities.iter().map(|(_, r)| r.output_dim()).sum()
    }

    /// Replaces every modality with the concatenated reduced features.
    pub fn reduce(&self, sample: &ModalSample) -> Result<ModalSample> {
        let mut feats = Vec::with_capacity(self.output_dim());
        for (name, r) in &self.modalities {
            let v = sample
                .get(name)
                .ok_or_else(|| Error::MissingModality(name.clone()))?;
            feats.extend(r.transform(v.data())?);
        }
        Ok(ModalSample::new(vec![(REDUCED.into(), Tensor::vector(feats))], sample.target))
    }

    pub fn reduce_clients(&self, clients: &[ClientDataset]) -> Result<Vec<ClientDataset>> {
        clients
            .iter()
            .map(|c| {
                Ok(ClientDataset {
                    client_id: c.client_id,
                    train: c.train.iter().map(|s| self.reduce(s)).collect::<Result<_>>()?,
                    test: c.test.iter().map(|s| self.reduce(s)).collect::<Result<_>>()?,
                    weight: c.weight,
                })
            })
            .collect()
    }
}

/// Head-only model over the reduced features.
pub fn reduced_model_config(input_dim: usize, head_hidden: &[usize]) -> ModelConfig {
    ModelConfig {
        modalities: vec![ModalityConfig {
            name: REDUCED.into(),
            encoder: EncoderConfig::Identity { input_dim },
        }],
        latent_dim: input_dim,
        fusion: FusionMode::None,
        head_hidden: head_hidden.to_vec(),
    }
}

/// Fits `kind` on pooled training data, reduces every modality to at most
/// `d` features, and trains the shared head federated with every
/// regularizer off.
pub fn baseline_pipeline(
    clients: &[ClientDataset],
    kind: ReducerKind,
    d: usize,
    cfg: &RoundConfig,
    head_hidden: &[usize],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let set = ReducerSet::fit(clients, kind, d, cfg.seed)?;
    let reduced = set.reduce_clients(clients)?;
    let model_cfg = reduced_model_config(set.output_dim(), head_hidden);
    run_training(&model_cfg, cfg, &LossWeights::mse_only(), &reduced, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_axis_is_sign_fixed() {
        let x = [-2.0, 0.0, -1.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        let r = fit_pca(&x, 4, 2, 1).unwrap();
        assert!((r.projection.data()[0] - 1.0).abs() < 1e-12);
        assert!(r.projection.data()[1].abs() < 1e-12);
    }

    #[test]
    fn rank_one_tsvd_reconstructs() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let x: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let r = fit_tsvd(&x, 3, 4, 1).unwrap();
        let p = r.projection.data();
        for (i, row) in x.chunks(4).enumerate() {
            let z = r.transform(row).unwrap()[0];
            for j in 0..4 {
                assert!((z * p[j] - x[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_large_target_dim() {
        assert!(matches!(fit_pca(&[1.0; 6], 3, 2, 3), Err(Error::Config(_))));
        assert!(matches!(fit_tsvd(&[1.0; 2], 1, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn rp_is_seeded() {
        assert_eq!(fit_rp(10, 3, 4).unwrap(), fit_rp(10, 3, 4).unwrap());
        assert_ne!(fit_rp(10, 3, 4).unwrap(), fit_rp(10, 3, 5).unwrap());
    }

    #[test]
    fn snapshot_round_trip() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        for r in [fit_pca(&x, 4, 3, 2).unwrap(), fit_rp(3, 2, 1).unwrap()] {
            let back = reducer_from_bytes(&reducer_to_bytes(&r).unwrap()).unwrap();
            assert_eq!(back, r);
        }
        let mut bytes = reducer_to_bytes(&fit_rp(3, 2, 1).unwrap()).unwrap();
        bytes.pop();
        assert!(reducer_from_bytes(&bytes).is_err());
    }
}
