use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use crate::error::{invalid, Result};
use crate::grpo::{Phase, Trainer, TrainerConfig, UpdateReport};

/// Window of the trailing mean used for thresholds and final reward.
pub const TRAILING_WINDOW: usize = 20;

/// Fraction of the best attainable reward that counts as solved.
pub const THRESHOLD_FRACTION: f64 = 0.9;

pub const METRICS_HEADER: &str = "update,phase,mean_reward,mean_vmr,loss,kl,clipped_frac,grad_norm";

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskSpec,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "spell".into(),
            task: TaskSpec::spell(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid(format!(
                "run name {:?} is not a plain directory name",
                self.name
            )));
        }
        self.task.build()?;
        self.trainer.validate(&self.task.schedule)
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub mean_vmr: Option<f64>,
    pub loss: f64,
    pub kl: f64,
    pub clipped_frac: f64,
    pub grad_norm: f64,
}

impl From<&UpdateReport> for MetricsRow {
    fn from(r: &UpdateReport) -> Self {
        Self {
            update: r.update,
            phase: r.phase,
            mean_reward: r.mean_reward,
            mean_vmr: r.mean_vmr,
            loss: r.loss,
            kl: r.kl,
            clipped_frac: r.clipped_frac,
            grad_norm: r.grad_norm,
        }
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let vmr = self.mean_vmr.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.phase,
            self.mean_reward,
            vmr,
            self.loss,
            self.kl,
            self.clipped_frac,
            self.grad_norm
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(invalid(format!(
                "metrics row has {} fields: {line:?}",
                f.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| invalid(format!("bad number {s:?}: {e}")))
        };
        Ok(Self {
            update: f[0]
                .parse()
                .map_err(|e| invalid(format!("bad update {:?}: {e}", f[0])))?,
            phase: f[1].parse()?,
            mean_reward: num(f[2])?,
            mean_vmr: if f[3].is_empty() {
                None
            } else {
                Some(num(f[3])?)
            },
            loss: num(f[4])?,
            kl: num(f[5])?,
            clipped_frac: num(f[6])?,
            grad_norm: num(f[7])?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(invalid(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub mode: String,
    pub updates: usize,
    pub threshold: f64,
    /// Updates completed when the trailing mean first exceeded the threshold.
    pub updates_to_threshold: Option<usize>,
    /// Trailing mean reward at the end of the run.
    pub final_reward: f64,
    pub best_trailing_reward: f64,
}

fn trailing_means(rewards: &[f64]) -> Vec<Option<f64>> {
    (0..rewards.len())
        .map(|i| {
            if i + 1 < TRAILING_WINDOW {
                return None;
            }
            let w: Vec<f64> = rewards[i + 1 - TRAILING_WINDOW..=i]
                .iter()
                .copied()
                .filter(|x| x.is_finite())
                .collect();
            (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
        })
        .collect()
}

/// Computes the summary from the reward trace alone.
pub fn summarize(
    name: &str,
    seed: u64,
    mode: &str,
    rewards: &[f64],
    max_reward: f64,
) -> RunSummary {
    let threshold = THRESHOLD_FRACTION * max_reward;
    let trailing = trailing_means(rewards);
    let updates_to_threshold = trailing
        .iter()
        .position(|m| m.is_some_and(|m| m > threshold))
        .map(|i| i + 1);
    let tail: Vec<f64> = rewards[rewards.len().saturating_sub(TRAILING_WINDOW)..]
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .collect();
    let final_reward = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    RunSummary {
        name: name.into(),
        seed,
        mode: mode.into(),
        updates: rewards.len(),
        threshold,
        updates_to_threshold,
        final_reward,
        best_trailing_reward: trailing
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Root directory for runs: `VARL_RUNS_DIR` or `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("VARL_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn fresh_run_dir(root: &Path, name: &str, seed: u64) -> Result<PathBuf> {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let base = root.join(name);
    fs::create_dir_all(&base)?;
    let mut dir = base.join(format!("{millis}-{seed}"));
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{millis}-{seed}.{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Artifacts of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: Option<PathBuf>,
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    update: usize,
    last_report: Option<&'a UpdateReport>,
    params: crate::mdp::ParamsArtifact,
}

/// Trains one run. With `root`, writes `config.json`, `metrics.csv`,
/// `vmr.csv`, checkpoints, `params.json` and `report.json` into a fresh
/// `root/<name>/<millis>-<seed>/`; on divergence a `failure.json` dump is
/// written before the error is returned.
pub fn train_run(config: &RunConfig, root: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let task = config.task.build()?;
    let cfg = &config.trainer;
    let mut trainer = Trainer::new(&task, cfg.clone())?;
    let dir = root
        .map(|r| fresh_run_dir(r, &config.name, cfg.seed))
        .transpose()?;
    let mut metrics_out = None;
    let mut vmr_out = None;
    if let Some(d) = &dir {
        write_json(&d.join("config.json"), config)?;
        let mut m = BufWriter::new(File::create(d.join("metrics.csv"))?);
        writeln!(m, "{METRICS_HEADER}")?;
        metrics_out = Some(m);
        let mut v = BufWriter::new(File::create(d.join("vmr.csv"))?);
        writeln!(v, "update,prefix_id,k,eta,estimate")?;
        vmr_out = Some(v);
        fs::create_dir_all(d.join("checkpoints"))?;
    }
    let mut rows = Vec::with_capacity(cfg.updates);
    let mut last: Option<UpdateReport> = None;
    for _ in 0..cfg.updates {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(d) = &dir {
                    if let Some(m) = metrics_out.as_mut() {
                        m.flush()?;
                    }
                    let dump = FailureDump {
                        error: e.to_string(),
                        update: trainer.updates_done(),
                        last_report: last.as_ref(),
                        params: trainer.params().to_artifact(Some(cfg.seed)),
                    };
                    write_json(&d.join("failure.json"), &dump)?;
                }
                return Err(e);
            }
        };
        let row = MetricsRow::from(&report);
        if let Some(m) = metrics_out.as_mut() {
            writeln!(m, "{}", row.to_csv())?;
        }
        if let Some(v) = vmr_out.as_mut() {
            for r in &report.vmr_records {
                writeln!(
                    v,
                    "{},{},{},{},{}",
                    r.update, r.prefix_id, r.k, r.eta, r.estimate
                )?;
            }
        }
        rows.push(row);
        if let Some(d) = &dir {
            let done = trainer.updates_done();
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                save_checkpoint(&d.join("checkpoints"), &trainer, cfg)?;
            }
        }
        last = Some(report);
    }
    if let Some(mut m) = metrics_out {
        m.flush()?;
    }
    if let Some(mut v) = vmr_out {
        v.flush()?;
    }
    let rewards: Vec<f64> = rows.iter().map(|r| r.mean_reward).collect();
    let summary = summarize(
        &config.name,
        cfg.seed,
        &cfg.mode.to_string(),
        &rewards,
        task.max_reward(),
    );
    if let Some(d) = &dir {
        trainer
            .params()
            .save_json(d.join("params.json"), Some(cfg.seed))?;
        write_json(&d.join("report.json"), &summary)?;
    }
    Ok(RunOutcome {
        dir,
        summary,
        metrics: rows,
    })
}

fn save_checkpoint(dir: &Path, trainer: &Trainer<'_>, cfg: &TrainerConfig) -> Result<()> {
    let done = trainer.updates_done();
    trainer
        .params()
        .save_json(dir.join(format!("ckpt-{done:06}.json")), Some(cfg.seed))?;
    let mut existing: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-"))
        })
        .collect();
    existing.sort();
    let keep = cfg.keep_checkpoints.max(1);
    if existing.len() > keep {
        for old in &existing[..existing.len() - keep] {
            fs::remove_file(old)?;
        }
    }
    Ok(())
}

/// Re-executes the run recorded in `dir` and reports whether its metrics
/// stream comes out byte-identical.
pub fn replay_matches(dir: &Path) -> Result<bool> {
    let config = RunConfig::from_json_file(dir.join("config.json"))?;
    let recorded = fs::read_to_string(dir.join("metrics.csv"))?;
    let outcome = train_run(&config, None)?;
    let mut text = format!("{METRICS_HEADER}\n");
    for row in &outcome.metrics {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    Ok(text == recorded)
}
