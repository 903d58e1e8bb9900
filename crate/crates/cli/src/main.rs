use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use varl_core::grpo::TrainMode;
use varl_core::harness::{
    aggregate_csv, collect_curves, curves_csv, curves_svg, run_sweep, runs_root, train_run,
    verify_theory, ProblemSpec, RunConfig, SweepSpec,
};
use varl_core::textreward::{score_jsonl, RewardConfig};
use varl_core::VarlError;

const EXIT_NON_FINITE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

/// Reinforcement-learning lab for next-scale token pyramids.
#[derive(Debug, Parser)]
#[command(name = "varl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run and write its artifacts under the runs root.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export reward-vs-update curves of every run below a directory.
    Curves {
        /// Directory to scan; defaults to the runs root.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Output directory for curves.csv and curves.svg; defaults to the scanned directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Check the soft-optimality identities on enumerable problems.
    Verify {
        /// Problem family as JSON; the default suite when omitted.
        #[arg(long)]
        problem: Option<PathBuf>,
    },
    /// Text-reward utilities.
    Reward {
        #[command(subcommand)]
        command: RewardCommand,
    },
}

#[derive(Debug, Subcommand)]
enum RewardCommand {
    /// Score JSON lines {"gt": [...], "pred": [...], "conf": [...]}; `-` reads stdin.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = RewardConfig::default().lambda)]
        lambda: f64,
    },
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> anyhow::Error {
    VarlError::InvalidConfig(format!("{}: {e}", path.display())).into()
}

fn train(config: &Path, mode: Option<TrainMode>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::from_json_file(config).map_err(|e| config_error(config, e))?;
    if let Some(m) = mode {
        cfg.trainer.mode = m;
    }
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    let root = runs_root();
    let outcome = train_run(&cfg, Some(&root))?;
    let dir = outcome.dir.expect("run directory requested");
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    eprintln!("run written to {}", dir.display());
    Ok(())
}

fn curves(runs: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let runs = runs.unwrap_or_else(runs_root);
    let out = out.unwrap_or_else(|| runs.clone());
    let curves =
        collect_curves(&runs).with_context(|| format!("reading runs under {}", runs.display()))?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("curves.csv"), curves_csv(&curves))?;
    fs::write(out.join("curves.svg"), curves_svg(&curves))?;
    eprintln!("{} runs exported to {}", curves.len(), out.display());
    Ok(())
}

fn sweep(spec: &Path) -> Result<()> {
    let s = SweepSpec::from_json_file(spec).map_err(|e| config_error(spec, e))?;
    let report = run_sweep(&s, Some(&runs_root()))?;
    print!("{}", aggregate_csv(&report));
    if let Some(d) = &report.dir {
        eprintln!("sweep written to {}", d.display());
    }
    Ok(())
}

/// Returns whether every property held.
fn verify(problem: Option<PathBuf>) -> Result<bool> {
    let spec = match &problem {
        Some(p) => ProblemSpec::from_json_file(p).map_err(|e| config_error(p, e))?,
        None => ProblemSpec::default(),
    };
    let report = verify_theory(&spec)?;
    for c in &report.checks {
        eprintln!(
            "{} {} (measured {:.3e}, tolerance {:.1e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.passed)
}

fn score(input: &Path, lambda: f64) -> Result<()> {
    let cfg = RewardConfig {
        lambda,
        ..RewardConfig::default()
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if input == Path::new("-") {
        score_jsonl(io::stdin().lock(), &mut out, &cfg)?;
    } else {
        let f = File::open(input).with_context(|| format!("opening {}", input.display()))?;
        score_jsonl(BufReader::new(f), &mut out, &cfg)?;
    }
    out.flush()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VarlError>() {
        Some(VarlError::NonFinite(_)) => EXIT_NON_FINITE,
        Some(VarlError::InvalidConfig(_) | VarlError::Json(_) | VarlError::TooLarge(_)) => {
            EXIT_CONFIG
        }
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train { config, mode, seed } => train(&config, mode, seed),
        Command::Curves { runs, out } => curves(runs, out),
        Command::Sweep { spec } => sweep(&spec),
        Command::Verify { problem } => match verify(problem) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Reward {
            command: RewardCommand::Score { input, lambda },
        } => score(&input, lambda),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
