use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::local::{local_update, LocalResult, StepLog};
use super::{aggregate, aggregation_weights, RepresentationHistory, RoundConfig, Snapshot};
use crate::datagen::{ClientDataset, ModalSample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{checkpoint, GlobalModel, ModelConfig};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write `round_{t}.ckpt` here after each aggregation.
    pub checkpoint_dir: Option<PathBuf>,
    /// Inference chunk size for evaluation passes.
    pub eval_chunk: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    /// `None` for the pooled row.
    pub client: Option<usize>,
    pub split: Split,
    pub mse: f64,
    /// Mean step losses `[pred, mi, kl, fcl]` of that round's local update.
    pub losses: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub rows: Vec<MetricRow>,
    pub pooled_test_mse: f64,
    /// Per client, in id order.
    pub drift: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GlobalModel,
    /// Evaluation of the initialized model before any round.
    pub initial: RoundMetrics,
    /// One entry per completed round, numbered from 1.
    pub trace: Vec<RoundMetrics>,
    pub steps: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn final_pooled_test_mse(&self) -> f64 {
        self.trace.last().unwrap_or(&self.initial).pooled_test_mse
    }

    /// Final per-client test MSE, in client order.
    pub fn final_client_test_mse(&self) -> Vec<f64> {
        self.trace
            .last()
            .unwrap_or(&self.initial)
            .rows
            .iter()
            .filter(|r| r.split == Split::Test && r.client.is_some())
            .map(|r| r.mse)
            .collect()
    }
}

fn sq_err(samples: &[ModalSample], predictions: &[f64]) -> f64 {
    samples
        .iter()
        .zip(predictions)
        .map(|(s, p)| (s.target - p).powi(2))
        .sum()
}

struct Eval {
    train: Option<(f64, Vec<f64>)>,
    test_sq: f64,
    test_n: usize,
}

fn evaluate(model: &GlobalModel, client: &ClientDataset, chunk: usize, with_train: bool) -> Result<Eval> {
    let train = if with_train {
        let out = model.infer_all(&client.train, chunk)?;
        let mse = sq_err(&client.train, &out.predictions) / client.train.len() as f64;
        Some((mse, out.fused))
    } else {
        None
    };
    let test = model.infer_all(&client.test, chunk)?;
    Ok(Eval {
        train,
        test_sq: sq_err(&client.test, &test.predictions),
        test_n: client.test.len(),
    })
}

fn mean_losses(steps: &[StepLog]) -> [f64; 4] {
    if steps.is_empty() {
        return [0.0; 4];
    }
    let n = steps.len() as f64;
    let mut acc = [0.0; 4];
    for s in steps {
        acc[0] += s.pred;
        acc[1] += s.mi;
        acc[2] += s.kl;
        acc[3] += s.fcl;
    }
    acc.map(|v| v / n)
}

fn test_rows(round: usize, evals: &[Eval]) -> (Vec<MetricRow>, f64) {
    let mut rows = Vec::new();
    let (mut sq, mut n) = (0.0, 0);
    for (i, e) in evals.iter().enumerate() {
        rows.push(MetricRow {
            round,
            client: Some(i + 1),
            split: Split::Test,
            mse: e.test_sq / e.test_n as f64,
            losses: None,
        });
        sq += e.test_sq;
        n += e.test_n;
    }
    let pooled = sq / n as f64;
    rows.push(MetricRow {
        round,
        client: None,
        split: Split::Test,
        mse: pooled,
        losses: None,
    });
    (rows, pooled)
}

/// Runs `cfg.rounds` rounds of broadcast, local update on every client and
/// aggregation. After each aggregation the new global model (with its
/// representations of each client's training data) enters every client's
/// history, and the model is evaluated on each client's test split and on
/// their union.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &RoundConfig,
    w: &LossWeights,
    clients: &[ClientDataset],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    for c in clients {
        if c.test.is_empty() {
            return Err(Error::Config(format!("client {} has no test data", c.client_id)));
        }
    }
    let weights = aggregation_weights(&clients.iter().map(|c| c.train.len()).collect::<Vec<_>>())?;
    let chunk = if opts.eval_chunk == 0 { 256 } else { opts.eval_chunk };
    let mut global = GlobalModel::init(model_cfg, &mut rng::stream(cfg.seed, &[tag::INIT]))?;
    let mut histories = vec![RepresentationHistory::for_negatives(w.history_size); clients.len()];

    let initial_evals = clients
        .par_iter()
        .map(|c| evaluate(&global, c, chunk, false))
        .collect::<Result<Vec<_>>>()?;
    let (rows, pooled) = test_rows(0, &initial_evals);
    let initial = RoundMetrics {
        round: 0,
        rows,
        pooled_test_mse: pooled,
        drift: Vec::new(),
        wall_ms: 0.0,
    };

    let mut trace = Vec::with_capacity(cfg.rounds);
    let mut all_steps = Vec::new();
    for t in 1..=cfg.rounds {
        let started = Instant::now();
        let results: Vec<LocalResult> = clients
            .par_iter()
            .zip(histories.par_iter())
            .map(|(c, h)| local_update(c, h, &global, cfg, w, t))
            .collect::<Result<Vec<_>>>()?;
        let updates: Vec<GlobalModel> = results.iter().map(|r| r.model.clone()).collect();
        global = aggregate(&updates, &weights)?;

        let shared = Arc::new(global.clone());
        let evals = clients
            .par_iter()
            .map(|c| evaluate(&global, c, chunk, true))
            .collect::<Result<Vec<_>>>()?;
        let (mut rows, pooled) = test_rows(t, &evals);
        for (i, (e, res)) in evals.into_iter().zip(&results).enumerate() {
            let (mse, reps) = e.train.expect("train evaluated");
            rows.push(MetricRow {
                round: t,
                client: Some(i + 1),
                split: Split::Train,
                mse,
                losses: Some(mean_losses(&res.steps)),
            });
            histories[i].push(Snapshot {
                model: Arc::clone(&shared),
                representations: Arc::new(reps),
            });
        }
        rows.sort_by_key(|r| (r.split == Split::Test, r.client.is_none(), r.client));
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            checkpoint::save(&global, &dir.join(format!("round_{t}.ckpt")))?;
        }
        trace.push(RoundMetrics {
            round: t,
            rows,
            pooled_test_mse: pooled,
            drift: results.iter().map(|r| r.drift).collect(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        all_steps.extend(results.into_iter().flat_map(|r| r.steps));
    }
    Ok(TrainOutcome {
        model: global,
        initial,
        trace,
        steps: all_steps,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns `round,client_id,split,mse,loss_pred,loss_mi,loss_kl,loss_fcl,wall_ms`.
/// `wall_ms` is left empty unless `with_wall_clock`, keeping output
/// deterministic by default.
pub fn write_metrics_csv(outcome: &TrainOutcome, path: &Path, with_wall_clock: bool) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "round,client_id,split,mse,loss_pred,loss_mi,loss_kl,loss_fcl,wall_ms").map_err(io)?;
    for rm in std::iter::once(&outcome.initial).chain(&outcome.trace) {
        let wall = with_wall_clock.then_some(rm.wall_ms);
        for r in &rm.rows {
            let client = r.client.map_or_else(|| "pooled".to_string(), |c| c.to_string());
            let l = r.losses.map(|l| l.map(Some)).unwrap_or([None; 4]);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                client,
                r.split.as_str(),
                r.mse,
                opt(l[0]),
                opt(l[1]),
                opt(l[2]),
                opt(l[3]),
                opt(wall)
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// JSON lines `{round, client, step, pred, mi, kl, fcl, total, grad_norm}`.
pub fn write_step_log(steps: &[StepLog], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Columns `round,client_id,drift`.
pub fn write_drift_csv(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "round,client_id,drift").map_err(io)?;
    for rm in &outcome.trace {
        for (i, d) in rm.drift.iter().enumerate() {
            writeln!(w, "{},{},{}", rm.round, i + 1, d).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
