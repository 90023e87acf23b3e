//! Prediction loss and the three regularizers, on a tape for training and as
//! plain array functions for evaluation and checks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// `−ln(1e-12)`: the cap on each `−log` term of the MI bound.
pub const MI_LOG_CAP: f64 = 27.631021115928547;

fn default_lambda() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    1.0
}
fn default_history() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_lambda")]
    pub lambda3: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Number of negative history entries `R`; the history holds `R + 1`.
    #[serde(default = "default_history")]
    pub history_size: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: default_lambda(),
            lambda2: default_lambda(),
            lambda3: default_lambda(),
            tau: default_tau(),
            sigma: default_sigma(),
            history_size: default_history(),
        }
    }
}

impl LossWeights {
    /// Prediction loss only.
    pub fn mse_only() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.history_size == 0 {
            return Err(Error::Config("history_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-term loss values for logging. Skipped terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub mi: f64,
    pub kl: f64,
    pub fcl: f64,
    pub total: f64,
}

/// Seeded permutation of `0..b` with no fixed points when `b >= 2`.
pub fn derangement(b: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..b).collect();
    if b < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// `ỹ_j = y_{perm(j)}` for a fresh derangement.
pub fn negative_targets(y: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    derangement(y.len(), rng).into_iter().map(|j| y[j]).collect()
}

fn check_batch(tape: &Tape, pred: Var, y: &[f64], op: &'static str) -> Result<usize> {
    let n = tape.value(pred).len();
    if n == 0 {
        return Err(Error::domain(op, "empty batch"));
    }
    if n != y.len() {
        return Err(Error::dim(op, tape.shape(pred), &[y.len()]));
    }
    Ok(n)
}

/// Tape forms of the loss terms. Predictions may be `[B]` or `[B×1]`.
pub mod graph {
    use super::*;

    /// `(1/b) Σ (y_j − ŷ_j)²`
    pub fn mse(tape: &mut Tape, pred: Var, y: &[f64]) -> Result<Var> {
        check_batch(tape, pred, y, "mse_loss")?;
        let target = tape.constant(tape.shape(pred).to_vec(), y.to_vec())?;
        let d = tape.sub(pred, target)?;
        let sq = tape.mul(d, d)?;
        tape.reduce_mean(sq, None)
    }

    /// `(1/b) Σ [−log σ(ŷ_j y_j) − log(1 − σ(ŷ_j ỹ_j))]`, each `−log` term
    /// capped at `−ln(1e-12)`.
    pub fn mi_lower_bound(tape: &mut Tape, pred: Var, y: &[f64], y_neg: &[f64]) -> Result<Var> {
        check_batch(tape, pred, y, "mi_lower_bound_loss")?;
        check_batch(tape, pred, y_neg, "mi_lower_bound_loss")?;
        let pos = tape.mul_const(pred, y)?;
        let neg = tape.mul_const(pred, y_neg)?;
        // −log σ(t) = softplus(−t); −log(1 − σ(t)) = softplus(t)
        let flipped = tape.scale(pos, -1.0);
        let a = tape.softplus(flipped);
        let a = tape.clamp_max(a, MI_LOG_CAP);
        let b = tape.softplus(neg);
        let b = tape.clamp_max(b, MI_LOG_CAP);
        let s = tape.add(a, b)?;
        tape.reduce_mean(s, None)
    }

    /// `1/(2bσ²·C(M,2)) Σ_{m<n} Σ_j ‖z_jm − z_jn‖²` for features `[B×d]`.
    pub fn symkl_alignment(tape: &mut Tape, z: &[Var], sigma: f64) -> Result<Var> {
        let m = z.len();
        if m < 2 {
            return Err(Error::domain("symkl_alignment_loss", "needs at least two modalities"));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        let b = tape.shape(z[0])[0];
        if b == 0 {
            return Err(Error::domain("symkl_alignment_loss", "empty batch"));
        }
        let mut acc = None;
        for i in 0..m {
            for j in i + 1..m {
                let d = tape.sub(z[i], z[j])?;
                let sq = tape.mul(d, d)?;
                let s = tape.sum(sq);
                acc = Some(match acc {
                    None => s,
                    Some(prev) => tape.add(prev, s)?,
                });
            }
        }
        let pairs = (m * (m - 1) / 2) as f64;
        let total = acc.expect("at least one pair");
        Ok(tape.scale(total, 1.0 / (2.0 * b as f64 * sigma * sigma * pairs)))
    }

    /// InfoNCE of `fused: [B×d]` against the positive anchors `prev` and the
    /// negatives in `history` (each `[B×d]`, row-major), with cosine
    /// similarity at temperature `tau`.
    pub fn infonce(
        tape: &mut Tape,
        fused: Var,
        prev: &[f64],
        history: &[Vec<f64>],
        tau: f64,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let b = match tape.shape(fused) {
            [b, _] if *b > 0 => *b,
            other => return Err(Error::dim("infonce_loss", other, &[0, 0])),
        };
        if history.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let pos = tape.cosine_rows(fused, prev)?;
        let mut cols = vec![tape.reshape(pos, vec![b, 1])?];
        for h in history {
            let s = tape.cosine_rows(fused, h)?;
            cols.push(tape.reshape(s, vec![b, 1])?);
        }
        let sims = tape.concat_cols(&cols)?;
        let logits = tape.scale(sims, 1.0 / tau);
        let lse = tape.logsumexp_rows(logits)?;
        let scaled_pos = tape.scale(pos, 1.0 / tau);
        let nll = tape.sub(lse, scaled_pos)?;
        tape.reduce_mean(nll, None)
    }
}

/// Contrastive anchors for one batch: positive representations from the
/// newest stored global model, negatives from older ones.
#[derive(Debug, Clone, Copy)]
pub struct Anchors<'a> {
    pub prev: &'a [f64],
    pub history: &'a [Vec<f64>],
}

/// Tape inputs for [`total_graph`].
pub struct GraphInputs<'a> {
    pub prediction: Var,
    pub features: &'a [Var],
    pub fused: Var,
    pub targets: &'a [f64],
    pub negatives: &'a [f64],
    pub anchors: Option<Anchors<'a>>,
}

/// `L_pred + λ1 L_mi + λ2 L_kl + λ3 L_fcl`. Terms with a zero weight are not
/// built; the contrastive term is also skipped when no anchors exist.
pub fn total_graph(
    tape: &mut Tape,
    inputs: &GraphInputs<'_>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut out = LossBreakdown::default();
    let mut total = graph::mse(tape, inputs.prediction, inputs.targets)?;
    out.pred = tape.item(total);
    if w.lambda1 > 0.0 {
        let t = graph::mi_lower_bound(tape, inputs.prediction, inputs.targets, inputs.negatives)?;
        out.mi = tape.item(t);
        let s = tape.scale(t, w.lambda1);
        total = tape.add(total, s)?;
    }
    if w.lambda2 > 0.0 {
        let t = graph::symkl_alignment(tape, inputs.features, w.sigma)?;
        out.kl = tape.item(t);
        let s = tape.scale(t, w.lambda2);
        total = tape.add(total, s)?;
    }
    if w.lambda3 > 0.0 {
        if let Some(a) = inputs.anchors {
            let t = graph::infonce(tape, inputs.fused, a.prev, a.history, w.tau)?;
            out.fcl = tape.item(t);
            let s = tape.scale(t, w.lambda3);
            total = tape.add(total, s)?;
        }
    }
    out.total = tape.item(total);
    Ok((total, out))
}

/// Array-level view of one batch's forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchForward {
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub negatives: Vec<f64>,
    /// Latent width `d`.
    pub dim: usize,
    /// One `[b×d]` row-major block per modality.
    pub features: Vec<Vec<f64>>,
    /// `[b×d]`.
    pub fused: Vec<f64>,
    pub prev: Option<Vec<f64>>,
    pub history: Vec<Vec<f64>>,
}

fn matrix(tape: &mut Tape, data: &[f64], d: usize, op: &'static str) -> Result<Var> {
    if d == 0 || data.len() % d != 0 {
        return Err(Error::dim(op, &[data.len()], &[d]));
    }
    tape.constant(vec![data.len() / d, d], data.to_vec())
}

pub fn mse_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(vec![pred.len()], pred.to_vec())?;
    let l = graph::mse(&mut tape, p, y)?;
    Ok(tape.item(l))
}

pub fn mi_lower_bound_loss(pred: &[f64], y: &[f64], y_neg: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(vec![pred.len()], pred.to_vec())?;
    let l = graph::mi_lower_bound(&mut tape, p, y, y_neg)?;
    Ok(tape.item(l))
}

/// `z`: per-modality `[b×d]` blocks.
pub fn symkl_alignment_loss(z: &[Vec<f64>], d: usize, sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = z
        .iter()
        .map(|m| matrix(&mut tape, m, d, "symkl_alignment_loss"))
        .collect::<Result<Vec<_>>>()?;
    let l = graph::symkl_alignment(&mut tape, &vars, sigma)?;
    Ok(tape.item(l))
}

pub fn infonce_loss(
    fused: &[f64],
    prev: &[f64],
    history: &[Vec<f64>],
    d: usize,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = matrix(&mut tape, fused, d, "infonce_loss")?;
    let l = graph::infonce(&mut tape, z, prev, history, tau)?;
    Ok(tape.item(l))
}

pub fn total_loss(fwd: &BatchForward, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let mut tape = Tape::new();
    let pred = tape.constant(vec![fwd.predictions.len()], fwd.predictions.clone())?;
    let features = fwd
        .features
        .iter()
        .map(|m| matrix(&mut tape, m, fwd.dim, "total_loss"))
        .collect::<Result<Vec<_>>>()?;
    let fused = matrix(&mut tape, &fwd.fused, fwd.dim, "total_loss")?;
    let anchors = fwd.prev.as_deref().map(|prev| Anchors {
        prev,
        history: &fwd.history,
    });
    let inputs = GraphInputs {
        prediction: pred,
        features: &features,
        fused,
        targets: &fwd.targets,
        negatives: &fwd.negatives,
        anchors,
    };
    Ok(total_graph(&mut tape, &inputs, w)?.1)
}
