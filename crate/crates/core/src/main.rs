use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resiter::autodiff::OpKind;
use resiter::cli::{
    resolve_output_root, run_drop_scan, run_gradcheck, run_probe, run_share_train, run_train, run_unroll,
    ExperimentConfig, GradcheckOptions,
};
use resiter::data::Split;
use resiter::Result;

#[derive(Parser)]
#[command(name = "resiter", version, about = "Train residual networks and probe iterative refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: config output_dir, then $RESITER_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Supplies the data and probe settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// Directory for the CSV (default: the run directory of the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and write a run directory.
    Train(TrainArgs),
    /// Run the configured probes on a checkpoint and append to probes.csv.
    Probe(CheckpointArgs),
    /// Accuracy with each block dropped, appended to probes.csv.
    DropScan(CheckpointArgs),
    /// Unroll the last block of a checkpoint and write unroll.csv.
    Unroll(CheckpointArgs),
    /// Train a weight-shared model (config needs a [sharing] section).
    ShareTrain(TrainArgs),
    /// Run the finite-difference suite; exits nonzero naming any failing check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<OpKind>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_out(a: &CheckpointArgs, cfg: &ExperimentConfig) -> PathBuf {
    a.out
        .clone()
        .unwrap_or_else(|| resolve_output_root(None, cfg.output_dir.as_deref()).join(&cfg.run_id))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.config, a.seed)?;
            let s = run_train(&cfg, &resolve_output_root(a.out.as_deref(), cfg.output_dir.as_deref()))?;
            println!("{}", s.run_dir.display());
        }
        Command::ShareTrain(a) => {
            let cfg = load_config(&a.config, a.seed)?;
            let s = run_share_train(&cfg, &resolve_output_root(a.out.as_deref(), cfg.output_dir.as_deref()))?;
            if let (Some(i), Some(f)) = (&s.explosion_init, &s.explosion_final) {
                println!("growth factor: init {:.4} final {:.4}", i.growth_factor, f.growth_factor);
            }
            println!("{}", s.run_dir.display());
        }
        Command::Probe(a) => {
            let cfg = load_config(&a.config, None)?;
            let out = checkpoint_out(&a, &cfg);
            let o = run_probe(&a.checkpoint, &cfg, a.split, &out)?;
            println!("{} rows -> {}", o.rows.len(), out.join("probes.csv").display());
        }
        Command::DropScan(a) => {
            let cfg = load_config(&a.config, None)?;
            let out = checkpoint_out(&a, &cfg);
            let rows = run_drop_scan(&a.checkpoint, &cfg, a.split, &out)?;
            for r in &rows {
                println!("block {} accuracy {:.4}", r.block.unwrap_or(0), r.value);
            }
        }
        Command::Unroll(a) => {
            let cfg = load_config(&a.config, None)?;
            let out = checkpoint_out(&a, &cfg);
            let rows = run_unroll(&a.checkpoint, &cfg, a.split, &out)?;
            println!("{} rows -> {}", rows.len(), out.join("unroll.csv").display());
        }
        Command::Gradcheck { seed, out, inject_fault } => {
            let report = run_gradcheck(&GradcheckOptions {
                seed,
                fault: inject_fault,
                ..Default::default()
            })?;
            for c in &report.checks {
                println!(
                    "{:<6} {:<32} {:.3e} (tolerance {:.0e}) {}",
                    if c.passed { "ok" } else { "FAIL" },
                    c.name,
                    c.max_rel_error,
                    c.tolerance,
                    c.detail
                );
            }
            println!("{:.1} s", report.wall_seconds);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| resiter::Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join("gradcheck.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .map_err(|e| resiter::Error::Io { path, source: e })?;
            }
            if !report.passed() {
                let names: Vec<_> = report.failures().iter().map(|c| c.name.as_str()).collect();
                eprintln!("error: gradient check failed: {}", names.join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
