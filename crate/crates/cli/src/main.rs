use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mfbismut::oracle::FdConfig;
use mfbismut::{ExperimentConfig, TaskSpec};
use mfbismut_cli::{run, RunOptions, Status};

/// Exit codes: 0 complete or PASS, 3 FAIL, 2 invalid config, 1 runtime error.
const EXIT_FAIL: u8 = 3;
const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(
    name = "mfbismut",
    version,
    about = "Intrinsic-derivative estimators for mean-field SDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task named in the config.
    Run(Common),
    /// Bismut estimator against coupled finite differences.
    Compare(Common),
    /// Run a shape sweep (a1_sweep, a2_check or tangent_check).
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Also write replication 0's paths and tangents to trajectories.csv.
    #[arg(long)]
    dump_trajectories: bool,
}

fn load(cmd: &Command) -> Result<(ExperimentConfig, RunOptions)> {
    let (Command::Run(c) | Command::Compare(c) | Command::Sweep(c)) = cmd;
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    match cmd {
        Command::Compare(_) if !matches!(cfg.task, TaskSpec::Compare { .. }) => {
            cfg.task = TaskSpec::Compare {
                fd: FdConfig::default(),
            };
        }
        Command::Sweep(_)
            if !matches!(
                cfg.task,
                TaskSpec::A1Sweep { .. } | TaskSpec::A2Check { .. } | TaskSpec::TangentCheck { .. }
            ) =>
        {
            bail!(
                "config error at `task`: `sweep` needs a1_sweep, a2_check or tangent_check, got {}",
                cfg.task.name()
            );
        }
        _ => {}
    }
    cfg.validate()?;
    let out_dir = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions {
        out_dir,
        threads: c.threads,
        dump_trajectories: c.dump_trajectories,
    };
    Ok((cfg, opts))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, opts) = match load(&cli.command) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    match run(&cfg, &opts) {
        Ok(report) => {
            println!("{} {:?} -> {}", report.task, report.status, opts.out_dir.display());
            match report.status {
                Status::Fail => ExitCode::from(EXIT_FAIL),
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
