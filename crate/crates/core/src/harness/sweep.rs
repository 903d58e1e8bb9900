use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::run::{train_run, RunConfig, RunSummary};
use crate::error::{invalid, Result};
use crate::math::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// The split between prefix and suffix steps.
    M,
    Alpha,
    KSamples,
    Alternation,
    Mode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::M => "m",
            SweepAxis::Alpha => "alpha",
            SweepAxis::KSamples => "k_samples",
            SweepAxis::Alternation => "alternation",
            SweepAxis::Mode => "mode",
        }
    }

    /// Writes `value` into the matching config field.
    pub fn apply(self, value: &Value, config: &mut RunConfig) -> Result<()> {
        let t = &mut config.trainer;
        let bad = || invalid(format!("value {value} does not fit axis {}", self.name()));
        match self {
            SweepAxis::M => t.split = value.as_u64().ok_or_else(bad)? as usize,
            SweepAxis::Alpha => t.panw.alpha = value.as_f64().ok_or_else(bad)?,
            SweepAxis::KSamples => t.vmr.k_samples = value.as_u64().ok_or_else(bad)? as usize,
            SweepAxis::Alternation => t.alternation = value.as_str().ok_or_else(bad)?.parse()?,
            SweepAxis::Mode => t.mode = value.as_str().ok_or_else(bad)?.parse()?,
        }
        Ok(())
    }
}

/// One axis of an ablation, crossed with seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default)]
    pub base: RunConfig,
    pub axis: SweepAxis,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid("sweep needs at least one value"));
        }
        if self.seeds.len() < 3 {
            return Err(invalid("sweep needs at least three seeds per cell"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid(format!(
                "sweep name {:?} is not a plain directory name",
                self.name
            )));
        }
        Ok(())
    }

    /// Config of one cell and seed.
    pub fn cell_config(&self, value: &Value, seed: u64) -> Result<RunConfig> {
        let mut c = self.base.clone();
        self.axis.apply(value, &mut c)?;
        c.trainer.seed = seed;
        c.name = format!("{}-{}-{}", self.name, self.axis.name(), value_label(value));
        Ok(c)
    }
}

pub fn value_label(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub value: String,
    pub runs: Vec<RunSummary>,
    pub run_dirs: Vec<PathBuf>,
    pub failures: Vec<String>,
    pub median_final_reward: Option<f64>,
    /// Median with unreached runs counted as never; `None` when the median
    /// run never reached the threshold.
    pub median_updates_to_threshold: Option<f64>,
    pub reached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub axis: SweepAxis,
    pub cells: Vec<CellReport>,
    pub dir: Option<PathBuf>,
}

/// Median of updates-to-threshold where unreached runs sort last.
pub fn median_updates(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| x.map_or(f64::INFINITY, |u| u as f64))
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    m.is_finite().then_some(m)
}

/// Aggregates one cell from its run summaries.
pub fn aggregate_cell(
    value: String,
    runs: Vec<RunSummary>,
    run_dirs: Vec<PathBuf>,
    failures: Vec<String>,
) -> CellReport {
    let finals: Vec<f64> = runs.iter().map(|r| r.final_reward).collect();
    let uts: Vec<Option<usize>> = runs.iter().map(|r| r.updates_to_threshold).collect();
    CellReport {
        value,
        reached: uts.iter().flatten().count(),
        median_final_reward: median(&finals),
        median_updates_to_threshold: median_updates(&uts),
        runs,
        run_dirs,
        failures,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Table-shaped CSV: one row per axis value.
pub fn aggregate_csv(report: &SweepReport) -> String {
    let mut out = format!(
        "{},seeds,failures,reached,median_final_reward,median_updates_to_threshold\n",
        report.axis.name()
    );
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.value,
            c.runs.len() + c.failures.len(),
            c.failures.len(),
            c.reached,
            fmt_opt(c.median_final_reward),
            fmt_opt(c.median_updates_to_threshold)
        ));
    }
    out
}

/// Trains every cell and seed; failed runs are recorded and skipped. With
/// `root`, run directories go under it and the aggregate is written to
/// `root/<name>/sweep-<millis>/`.
pub fn run_sweep(spec: &SweepSpec, root: Option<&Path>) -> Result<SweepReport> {
    spec.validate()?;
    for v in &spec.values {
        spec.cell_config(v, spec.seeds[0])?.validate()?;
    }
    let mut cells = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let mut runs = Vec::new();
        let mut dirs = Vec::new();
        let mut failures = Vec::new();
        for &seed in &spec.seeds {
            let config = spec.cell_config(value, seed)?;
            match train_run(&config, root) {
                Ok(o) => {
                    runs.push(o.summary);
                    dirs.extend(o.dir);
                }
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        cells.push(aggregate_cell(value_label(value), runs, dirs, failures));
    }
    let mut report = SweepReport {
        name: spec.name.clone(),
        axis: spec.axis,
        cells,
        dir: None,
    };
    if let Some(r) = root {
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let dir = r.join(&spec.name).join(format!("sweep-{millis}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("aggregate.csv"), aggregate_csv(&report))?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
        report.dir = Some(dir.clone());
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}
