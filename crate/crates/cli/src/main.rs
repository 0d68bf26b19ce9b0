//! `retkv`: theory checks, gate training, eviction evaluation and survival
//! curves for the toy retention model.
//!
//! Exit status: 0 on success, 1 when a check fails or training diverges,
//! 2 on a bad config, checkpoint or command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retention_kv::config::RunConfig;
use retention_kv::eviction::Policy;
use retention_kv::experiments::{
    load_gates, run_eval, run_survival, run_theory_suite, run_train, save_gates, write_eval_csv, write_json, write_loss_curve,
    write_survival_csv,
};
use retention_kv::Error;

/// Worker threads for the parallel parts; defaults to one per core.
const THREADS_ENV: &str = "RETKV_THREADS";

#[derive(Parser, Debug)]
#[command(name = "retkv", version, about = "Retention-gated KV eviction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dilution bound, retention identity, persistence and VAR-fit checks.
    Theory(Common),
    /// Train retention gates on the frozen toy backbone.
    Train(Common),
    /// Accuracy of each eviction policy at each budget.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Gate checkpoint; defaults to `<out>/gates.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Survival curves from full-cache attention traces.
    Survival(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed. Required without --config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match (&self.config, self.seed) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(seed)) => RunConfig::new(seed),
            (None, None) => return Err(Error::Config("a seed is required: pass --config or --seed".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Outcome {
    Ok,
    Failed(String),
}

fn save_config(cfg: &RunConfig, name: &str) -> Result<(), Error> {
    write_json(&cfg.out_dir.join(name), cfg)
}

fn theory(common: &Common) -> Result<Outcome, Error> {
    let cfg = common.resolve()?;
    let report = run_theory_suite(&cfg)?;
    let path = cfg.out_dir.join("theory.json");
    write_json(&path, &report)?;
    println!(
        "theory: {} violations, {} assumption violations -> {}",
        report.violations,
        report.assumption_violations,
        path.display()
    );
    Ok(if report.passed() {
        Outcome::Ok
    } else {
        Outcome::Failed(format!("{} checks failed", report.violations + report.assumption_violations))
    })
}

fn train(common: &Common) -> Result<Outcome, Error> {
    let cfg = common.resolve()?;
    let out = run_train(&cfg)?;
    save_config(&cfg, "train_config.json")?;
    save_gates(&cfg.out_dir.join("gates.ckpt"), &out.params, cfg.seed)?;
    write_loss_curve(&cfg.out_dir.join("loss.csv"), &out.curve)?;
    if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
        println!(
            "train: quality {:.4} -> {:.4}, cap {:.1} -> {:.1} -> {}",
            first.quality,
            last.quality,
            first.cap,
            last.cap,
            cfg.out_dir.display()
        );
    }
    Ok(Outcome::Ok)
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<Outcome, Error> {
    let cfg = common.resolve()?;
    let needs_gates = cfg.eval.policies.iter().any(|p| matches!(p, Policy::Global | Policy::PerHead));
    let default = cfg.out_dir.join("gates.ckpt");
    let gates = match checkpoint {
        Some(path) => Some(load_gates(path)?),
        None if needs_gates => Some(load_gates(&default)?),
        None => None,
    };
    let rows = run_eval(&cfg, gates.as_ref())?;
    let path = cfg.out_dir.join("eval.csv");
    write_eval_csv(&path, &rows)?;
    for r in &rows {
        let budget = r.budget.map_or_else(|| "-".to_string(), |b| b.to_string());
        println!("{:<20} {:>6}  acc {:.3}  retained {:.1}", r.policy, budget, r.accuracy, r.mean_retained);
    }
    Ok(Outcome::Ok)
}

fn survival(common: &Common) -> Result<Outcome, Error> {
    let cfg = common.resolve()?;
    let rows = run_survival(&cfg)?;
    let path = cfg.out_dir.join("survival.csv");
    write_survival_csv(&path, &rows)?;
    println!("survival: {} rows -> {}", rows.len(), path.display());
    Ok(Outcome::Ok)
}

fn set_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = set_threads().and_then(|()| match &cli.command {
        Command::Theory(c) => theory(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Survival(c) => survival(c),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("retkv: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("retkv: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
