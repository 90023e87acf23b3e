use rand::seq::SliceRandom;
use serde::Serialize;

use super::{param_distance, RepresentationHistory, RoundConfig};
use crate::datagen::{Batch, ClientDataset};
use crate::error::{Error, Result};
use crate::losses::{negative_targets, total_graph, Anchors, GraphInputs, LossWeights};
use crate::model::GlobalModel;
use crate::rng::{self, tag};
use crate::tensor::{Adam, AdamConfig, Tape};

/// One optimizer step's loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub round: usize,
    pub client: usize,
    pub step: usize,
    pub pred: f64,
    pub mi: f64,
    pub kl: f64,
    pub fcl: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub model: GlobalModel,
    pub steps: Vec<StepLog>,
    /// `‖w_i^{t,E} − w^t‖₂`.
    pub drift: f64,
}

/// Runs every stored model on `batch` without gradients. The newest gives
/// the positive anchors, older ones the negatives. `None` when the history
/// is empty, meaning the contrastive term is skipped.
pub fn compute_anchor_representations(
    history: &RepresentationHistory,
    batch: &Batch,
) -> Result<Option<(Vec<f64>, Vec<Vec<f64>>)>> {
    let Some(newest) = history.newest() else {
        return Ok(None);
    };
    let prev = newest.model.infer(batch)?.fused;
    let older = history
        .older()
        .map(|s| s.model.infer(batch).map(|o| o.fused))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some((prev, older)))
}

fn gather_rows(reps: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&reps[i * d..(i + 1) * d]);
    }
    out
}

/// `E` epochs of minibatch Adam on the client's training data, starting from
/// `global` with fresh optimizer state. Anchors come from `history`, whose
/// snapshots carry precomputed representations of these training samples.
pub fn local_update(
    client: &ClientDataset,
    history: &RepresentationHistory,
    global: &GlobalModel,
    cfg: &RoundConfig,
    w: &LossWeights,
    round: usize,
) -> Result<LocalResult> {
    let n = client.train.len();
    if n == 0 {
        return Err(Error::Config(format!("client {} has no training data", client.client_id)));
    }
    let mut model = global.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate))?;
    let mut r = rng::stream(cfg.seed, &[tag::CLIENT, client.client_id as u64, round as u64]);
    let names = global.config.names();
    let d = global.config.head_input_dim();
    let use_anchors = w.lambda3 > 0.0 && !history.is_empty();
    if use_anchors {
        for s in history.iter() {
            if s.representations.len() != n * d {
                return Err(Error::Consistency(format!(
                    "history representations cover {} values, expected {}",
                    s.representations.len(),
                    n * d
                )));
            }
        }
    }

    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(cfg.batch_size) {
            let batch = Batch::gather(&client.train, idx, &names)?;
            let negatives = if w.lambda1 > 0.0 {
                negative_targets(&batch.targets, &mut r)
            } else {
                Vec::new()
            };
            let (prev, older) = if use_anchors {
                let newest = history.newest().expect("non-empty");
                let prev = gather_rows(&newest.representations, d, idx);
                let older: Vec<Vec<f64>> = history
                    .older()
                    .map(|s| gather_rows(&s.representations, d, idx))
                    .collect();
                (prev, older)
            } else {
                (Vec::new(), Vec::new())
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let fv = bound.forward_batch(&mut tape, &batch)?;
            let inputs = GraphInputs {
                prediction: fv.prediction,
                features: &fv.features,
                fused: fv.fused,
                targets: &batch.targets,
                negatives: &negatives,
                anchors: use_anchors.then_some(Anchors {
                    prev: &prev,
                    history: &older,
                }),
            };
            let (loss, breakdown) = total_graph(&mut tape, &inputs, w)?;
            let grads = tape.backward(loss)?;
            model.store_grads(&bound, &grads);
            let grad_norm = model
                .params_mut()
                .iter()
                .filter_map(|(_, t)| t.grad.as_ref())
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if !breakdown.total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::domain(
                    "local_update",
                    format!("non-finite loss or gradient at client {}", client.client_id),
                ));
            }
            adam.step(&mut model.params_mut())?;
            steps.push(StepLog {
                round,
                client: client.client_id,
                step: steps.len(),
                pred: breakdown.pred,
                mi: breakdown.mi,
                kl: breakdown.kl,
                fcl: breakdown.fcl,
                total: breakdown.total,
                grad_norm,
            });
        }
    }
    let drift = param_distance(&model, global);
    Ok(LocalResult {
        model,
        steps,
        drift,
    })
}
