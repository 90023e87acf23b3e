use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdrmfl_core::datagen::nir::{write_standin, StandinLayout};
use fdrmfl_core::datagen::snapshot;
use fdrmfl_core::fedsim::TrainOptions;
use fdrmfl_core::harness::{
    load_dataset, parse_methods, realize, run_checks, run_dir, run_method, run_suite, slug, write_reports,
    write_run_logs, ExperimentConfig, SuiteOptions,
};
use fdrmfl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fdrmfl", version, about = "Federated multi-modal regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML; defaults to one synthetic link-2 scenario.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overrides the config; default `out`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset snapshots, one per scenario.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// One seeded run per method with the full metrics trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of fdrmfl,pca,tsvd,rp.
        #[arg(long, value_name = "LIST", default_value = "fdrmfl")]
        methods: String,
        /// Write a model checkpoint after every round.
        #[arg(long)]
        save_rounds: bool,
        /// Fill the wall_ms column of the metrics CSV.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Repeated seeded comparison with aggregated tables.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
        #[arg(long, value_name = "LIST")]
        methods: Option<String>,
        /// Skip the per-run metrics, step logs and drift files.
        #[arg(long)]
        no_run_logs: bool,
        #[arg(long)]
        wall_clock: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run the built-in invariant and oracle checks.
    Check,
    /// Write a generated NIR-shaped CSV for offline use.
    Standin {
        /// tecator or corn
        #[arg(long)]
        layout: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn gen(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for scenario in cfg.scenarios() {
        let name = cfg.scenario_name(&scenario);
        let ds = load_dataset(&cfg, &scenario, cfg.seed)?;
        let path = out.join(format!("{}_seed{}.jsonl", slug(&name), cfg.seed));
        snapshot::write(&ds, &path)?;
        println!("{} train={} test={} -> {}", name, ds.train.len(), ds.test.len(), path.display());
    }
    Ok(())
}

fn train(common: &Common, methods: &str, save_rounds: bool, wall_clock: bool) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let methods = parse_methods(methods)?;
    let out = out_dir(&cfg);
    for scenario in cfg.scenarios() {
        let data = realize(&cfg, &scenario, cfg.seed)?;
        let dir = run_dir(&out, &data.scenario, cfg.seed);
        for &method in &methods {
            let opts = TrainOptions {
                checkpoint_dir: save_rounds.then(|| dir.join(format!("{method}_rounds"))),
                ..Default::default()
            };
            let outcome = run_method(&cfg, method, &data, &opts)?;
            write_run_logs(&dir, method, &outcome, wall_clock)?;
            println!(
                "{} seed={} method={} pooled_test_mse={:.6} -> {}",
                data.scenario,
                cfg.seed,
                method,
                outcome.final_pooled_test_mse(),
                dir.display()
            );
        }
    }
    Ok(())
}

struct SuiteArgs<'a> {
    repeats: Option<usize>,
    methods: Option<&'a str>,
    run_logs: bool,
    wall_clock: bool,
    quiet: bool,
}

fn suite(common: &Common, a: SuiteArgs<'_>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(m) = a.methods {
        cfg.methods = parse_methods(m)?;
    }
    let out = out_dir(&cfg);
    let opts = SuiteOptions {
        run_logs: a.run_logs.then(|| out.join("runs")),
        wall_clock: a.wall_clock,
        progress: !a.quiet,
    };
    let outcome = run_suite(&cfg, &opts)?;
    write_reports(&outcome, &out)?;
    println!("wrote {} and {}", out.join("results.csv").display(), out.join("results.md").display());
    Ok(())
}

fn check() -> Result<bool> {
    let mut stdout = std::io::stdout().lock();
    let mut ok = true;
    for r in run_checks() {
        ok &= r.passed;
        let _ = writeln!(stdout, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(ok)
}

fn standin(layout: &str, out: &Path, seed: u64) -> Result<()> {
    let layout = StandinLayout::parse(layout)?;
    write_standin(layout, out, seed)?;
    println!(
        "wrote {} ({} rows x {} wavelengths, stand-in data)",
        out.display(),
        layout.rows(),
        layout.wavelengths()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { common } => gen(&common).map(|_| true),
        Command::Train { common, methods, save_rounds, wall_clock } => {
            train(&common, &methods, save_rounds, wall_clock).map(|_| true)
        }
        Command::Suite { common, repeats, methods, no_run_logs, wall_clock, quiet } => suite(
            &common,
            SuiteArgs {
                repeats,
                methods: methods.as_deref(),
                run_logs: !no_run_logs,
                wall_clock,
                quiet,
            },
        )
        .map(|_| true),
        Command::Check => check(),
        Command::Standin { layout, out, seed } => standin(&layout, &out, seed).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
