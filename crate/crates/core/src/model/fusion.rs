//! Attention fusion of per-modality features into one representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::init_uniform;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `α = softmax_m(z_m W_att)`, `Z = (Σ α_m z_m) W_fusion + b_fusion`.
    #[default]
    Attention,
    /// Uniform weights `α_m = 1/M`; `W_att` is carried but unused.
    Mean,
    /// No fusion parameters; the single modality feature is `Z` itself.
    None,
}

/// `w_att: [d×1]`, `w_fusion: [d×d]`, `b_fusion: [d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<P> {
    pub w_att: P,
    pub w_fusion: P,
    pub b_fusion: P,
}

impl FusionParams<Tensor> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        FusionParams {
            w_att: init_uniform(&[d, 1], d, rng),
            w_fusion: init_uniform(&[d, d], d, rng),
            b_fusion: init_uniform(&[d], d, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        FusionParams {
            w_att: Tensor::zeros(&[d, 1]),
            w_fusion: Tensor::zeros(&[d, d]),
            b_fusion: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_fusion.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w_att.shape() != [d, 1] {
            return Err(Error::dim("fusion w_att", self.w_att.shape(), &[d, 1]));
        }
        if self.w_fusion.shape() != [d, d] || self.b_fusion.len() != d {
            return Err(Error::dim("fusion w_fusion", self.w_fusion.shape(), &[d, d]));
        }
        Ok(())
    }

    fn single_rows(&self, z: &[Tensor], tape: &mut Tape) -> Result<Vec<Var>> {
        let d = self.dim();
        z.iter()
            .map(|zm| {
                if zm.len() != d {
                    return Err(Error::dim("fuse", zm.shape(), &[d]));
                }
                tape.constant(vec![1, d], zm.data().to_vec())
            })
            .collect()
    }

    /// Attention weights `α_1..α_M` for single feature vectors.
    pub fn attention_weights(&self, z: &[Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let rows = self.single_rows(z, &mut tape)?;
        let alpha = bound.attention(&mut tape, &rows)?;
        Ok(tape.data(alpha).to_vec())
    }

    /// Fuses single feature vectors `z_1..z_M`, each of length `d`.
    pub fn fuse(&self, mode: FusionMode, z: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.map(&mut |t| tape.leaf(t));
        let rows = self.single_rows(z, &mut tape)?;
        let fused = bound.forward(&mut tape, mode, &rows)?;
        Ok(Tensor::vector(tape.data(fused).to_vec()))
    }
}

impl<P> FusionParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> FusionParams<Q> {
        FusionParams {
            w_att: f(&self.w_att),
            w_fusion: f(&self.w_fusion),
            b_fusion: f(&self.b_fusion),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.w_att"), &self.w_att);
        f(format!("{prefix}.w_fusion"), &self.w_fusion);
        f(format!("{prefix}.b_fusion"), &self.b_fusion);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{prefix}.w_att"), &mut self.w_att);
        f(format!("{prefix}.w_fusion"), &mut self.w_fusion);
        f(format!("{prefix}.b_fusion"), &mut self.b_fusion);
    }
}

impl FusionParams<Var> {
    /// `α: [B×M]` with rows summing to one.
    pub fn attention(&self, tape: &mut Tape, z: &[Var]) -> Result<Var> {
        if z.is_empty() {
            return Err(Error::domain("fuse", "no modalities"));
        }
        let scores = z
            .iter()
            .map(|&zm| tape.matmul(zm, self.w_att))
            .collect::<Result<Vec<_>>>()?;
        let s = tape.concat_cols(&scores)?;
        tape.softmax_rows(s)
    }

    /// `z`: M features of shape `[B×d]` → `Z: [B×d]`.
    pub fn forward(&self, tape: &mut Tape, mode: FusionMode, z: &[Var]) -> Result<Var> {
        if z.is_empty() {
            return Err(Error::domain("fuse", "no modalities"));
        }
        let pooled = match mode {
            FusionMode::Attention => {
                let alpha = self.attention(tape, z)?;
                let mut acc = None;
                for (m, &zm) in z.iter().enumerate() {
                    let a = tape.slice_cols(alpha, m, 1)?;
                    let term = tape.mul_col(zm, a)?;
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => tape.add(prev, term)?,
                    });
                }
                acc.expect("non-empty")
            }
            FusionMode::Mean => {
                let mut acc = z[0];
                for &zm in &z[1..] {
                    acc = tape.add(acc, zm)?;
                }
                tape.scale(acc, 1.0 / z.len() as f64)
            }
            FusionMode::None => {
                return Err(Error::Contract("fusion parameters used with fusion mode none".into()))
            }
        };
        let y = tape.matmul(pooled, self.w_fusion)?;
        tape.add_row(y, self.b_fusion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn equal_features_get_uniform_weights() {
        let mut r = rng::stream(1, &[]);
        let p = FusionParams::init(4, &mut r);
        let z = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        let alpha = p.attention_weights(&[z.clone(), z.clone(), z.clone()]).unwrap();
        for a in &alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let fused = p.fuse(FusionMode::Attention, &[z.clone(), z.clone(), z.clone()]).unwrap();
        let single = p.fuse(FusionMode::Attention, &[z.clone()]).unwrap();
        for (a, b) in fused.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_modality_affine_readout() {
        let mut p = FusionParams::zeros(2);
        p.w_fusion = Tensor::matrix(&[&[1.0, 2.0], &[0.0, 1.0]]);
        p.b_fusion = Tensor::vector(vec![0.5, -0.5]);
        let z = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(p.attention_weights(&[z.clone()]).unwrap(), vec![1.0]);
        let fused = p.fuse(FusionMode::Attention, &[z]).unwrap();
        assert_eq!(fused.data(), &[3.5, 9.5]);
    }

    #[test]
    fn two_way_softmax_three_to_one() {
        let mut p = FusionParams::zeros(2);
        p.w_att = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let z1 = Tensor::vector(vec![3f64.ln(), 0.0]);
        let z2 = Tensor::vector(vec![0.0, 5.0]);
        let alpha = p.attention_weights(&[z1, z2]).unwrap();
        assert!((alpha[0] - 0.75).abs() < 1e-12);
        assert!((alpha[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_modalities_is_domain_error() {
        let p = FusionParams::zeros(3);
        assert!(matches!(
            p.fuse(FusionMode::Attention, &[]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn mean_mode_averages() {
        let mut p = FusionParams::zeros(2);
        p.w_fusion = Tensor::eye(2);
        let out = p
            .fuse(
                FusionMode::Mean,
                &[Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![3.0, 6.0])],
            )
            .unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }
}
