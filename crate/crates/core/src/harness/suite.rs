//! Seeded repeated comparison runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{DatasetSpec, ExperimentConfig, Method, Scenario};
use super::report::{mean_std, ClientKey, ResultRow, ResultsTable};
use crate::baselines::{baseline_pipeline, ReducerKind};
use crate::datagen::{self, nir, partition_clients, ClientDataset, Dataset, PartitionScheme};
use crate::error::{Error, Result};
use crate::fedsim::{
    run_training, write_drift_csv, write_metrics_csv, write_step_log, TrainOptions, TrainOutcome,
};
use crate::model::ModelConfig;

/// Partitioned data for one (scenario, seed), shared by every method.
#[derive(Debug, Clone)]
pub struct Realization {
    pub scenario: String,
    pub seed: u64,
    pub clients: Vec<ClientDataset>,
    pub model: ModelConfig,
    /// SHA-256 of the full dataset before partitioning.
    pub fingerprint: String,
}

/// The unpartitioned dataset for one (scenario, seed).
pub fn load_dataset(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Result<Dataset> {
    match scenario {
        Scenario::Synthetic { link } => datagen::generate(&cfg.synthetic_config(*link, seed)?),
        Scenario::Nir { target } => nir::load_nir_csv(&cfg.nir_path()?, &cfg.nir_schema(target)?, seed),
    }
}

pub fn realize(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Result<Realization> {
    let dataset = load_dataset(cfg, scenario, seed)?;
    let model = match scenario {
        Scenario::Synthetic { .. } => cfg.model_config(None, None)?,
        Scenario::Nir { .. } => {
            let first = dataset
                .train
                .first()
                .ok_or_else(|| Error::Validation("empty dataset".into()))?;
            let t = first.get(nir::SPECTRUM).map(|s| s.shape()[0]);
            let k = first.get(nir::SCALARS).map(|s| s.len());
            cfg.model_config(t, k)?
        }
    };
    let fingerprint = dataset.fingerprint();
    let clients = partition_clients(dataset, cfg.round.clients, cfg.partition, seed)?;
    Ok(Realization {
        scenario: cfg.scenario_name(scenario),
        seed,
        clients,
        model,
        fingerprint,
    })
}

pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    data: &Realization,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut round = cfg.round;
    round.seed = data.seed;
    let res = match method {
        Method::Fdrmfl => run_training(&data.model, &round, &cfg.loss, &data.clients, opts),
        Method::Pca | Method::Tsvd | Method::Rp => {
            let kind = match method {
                Method::Pca => ReducerKind::Pca,
                Method::Tsvd => ReducerKind::Tsvd,
                _ => ReducerKind::Rp,
            };
            baseline_pipeline(&data.clients, kind, cfg.reduced_dim, &round, &data.model.head_hidden, opts)
        }
    };
    res.map_err(|e| Error::Run {
        method: format!("{} on {}", method, data.scenario),
        seed: data.seed,
        source: Box::new(e),
    })
}

/// One method's final test MSE for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: String,
    pub seed: u64,
    pub method: Method,
    pub client: ClientKey,
    pub mse: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Per-run metrics, step logs and drift go under `out/runs/`.
    pub run_logs: Option<PathBuf>,
    pub wall_clock: bool,
    /// Print one line per (seed, method) to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub table: ResultsTable,
    pub runs: Vec<RunRecord>,
    pub notes: Vec<String>,
}

pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `{method}_metrics.csv`, `{method}_steps.jsonl` and
/// `{method}_drift.csv` into `dir`.
pub fn write_run_logs(dir: &Path, method: Method, outcome: &TrainOutcome, wall_clock: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(outcome, &dir.join(format!("{method}_metrics.csv")), wall_clock)?;
    write_step_log(&outcome.steps, &dir.join(format!("{method}_steps.jsonl")))?;
    write_drift_csv(outcome, &dir.join(format!("{method}_drift.csv")))
}

pub fn run_dir(root: &Path, scenario: &str, seed: u64) -> PathBuf {
    root.join(slug(scenario)).join(format!("seed{seed}"))
}

/// For each scenario and each seed `base..base+N`, builds one data
/// realization and runs every configured method on it, then aggregates the
/// final per-client and pooled test MSE.
pub fn run_suite(cfg: &ExperimentConfig, opts: &SuiteOptions) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for scenario in cfg.scenarios() {
        for r in 0..cfg.repeats {
            let seed = cfg.seed + r as u64;
            let data = realize(cfg, &scenario, seed)?;
            for &method in &cfg.methods {
                let started = Instant::now();
                let outcome = run_method(cfg, method, &data, &TrainOptions::default())?;
                let pooled = outcome.final_pooled_test_mse();
                if opts.progress {
                    eprintln!(
                        "[suite] {} seed={} method={} pooled_mse={:.4} wall={:.1}s data={}",
                        data.scenario,
                        seed,
                        method,
                        pooled,
                        started.elapsed().as_secs_f64(),
                        &data.fingerprint[..12]
                    );
                }
                if let Some(root) = &opts.run_logs {
                    write_run_logs(&run_dir(root, &data.scenario, seed), method, &outcome, opts.wall_clock)?;
                }
                for (i, mse) in outcome.final_client_test_mse().into_iter().enumerate() {
                    runs.push(RunRecord {
                        scenario: data.scenario.clone(),
                        seed,
                        method,
                        client: ClientKey::Client(i + 1),
                        mse,
                        fingerprint: data.fingerprint.clone(),
                    });
                }
                runs.push(RunRecord {
                    scenario: data.scenario.clone(),
                    seed,
                    method,
                    client: ClientKey::Pooled,
                    mse: pooled,
                    fingerprint: data.fingerprint.clone(),
                });
            }
        }
    }
    let table = aggregate_runs(cfg, &runs);
    let mut notes = cfg.notes.clone();
    if let DatasetSpec::Nir { name, path_env, .. } = &cfg.dataset {
        let (path, standin) = cfg.nir_source()?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        if standin {
            notes.push(format!(
                "STAND-IN DATA: {name} rows come from the generated fixture {file}, not real measurements. Set ${} to the real CSV.",
                path_env.as_deref().unwrap_or("path")
            ));
        } else {
            notes.push(format!("{name} rows read from {file}."));
        }
    }
    if cfg.partition == PartitionScheme::LabelSortedShards {
        notes.push("Clients use label-sorted shards, a stand-in for an unspecified non-IID split.".into());
    }
    if cfg.methods.iter().any(|m| *m != Method::Fdrmfl) {
        notes.push(format!(
            "Baseline reducers are fit on pooled training rows, at most {} features per modality.",
            cfg.reduced_dim
        ));
    }
    Ok(SuiteOutcome { table, runs, notes })
}

/// Groups run records into (scenario, client, method) cells, keeping the
/// config's scenario and method order with clients ascending and pooled last.
pub fn aggregate_runs(cfg: &ExperimentConfig, runs: &[RunRecord]) -> ResultsTable {
    let mut rows = Vec::new();
    let mut scenarios: Vec<&str> = Vec::new();
    for r in runs {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    for sc in scenarios {
        let mut clients: Vec<ClientKey> = runs.iter().filter(|r| r.scenario == sc).map(|r| r.client).collect();
        clients.sort();
        clients.dedup();
        for client in clients {
            for &method in &cfg.methods {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.scenario == sc && r.client == client && r.method == method)
                    .map(|r| r.mse)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean_mse, std_mse) = mean_std(&vals);
                rows.push(ResultRow {
                    scenario: sc.to_string(),
                    client,
                    method,
                    mean_mse,
                    std_mse,
                    n: vals.len(),
                });
            }
        }
    }
    ResultsTable {
        header: cfg.hyperparameters(),
        rows,
    }
}

pub fn runs_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("scenario,seed,method,client,mse,dataset_sha256\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scenario, r.seed, r.method, r.client, r.mse, r.fingerprint
        ));
    }
    out
}

/// `results.csv`, `results.md` and `runs.csv` under `dir`.
pub fn write_reports(outcome: &SuiteOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("results.csv", outcome.table.to_csv())?;
    write("results.md", outcome.table.to_markdown(&outcome.notes))?;
    write("runs.csv", runs_csv(&outcome.runs))
}
