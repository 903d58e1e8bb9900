use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{read_metrics, RunConfig};
use crate::error::Result;
use crate::math::median;

/// Reward-vs-update series of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub dir: PathBuf,
    pub name: String,
    pub mode: String,
    pub seed: u64,
    pub rewards: Vec<f64>,
}

/// Run directories (holding `config.json` and `metrics.csv`) below `root`,
/// sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if !d.is_dir() {
            continue;
        }
        if d.join("config.json").is_file() && d.join("metrics.csv").is_file() {
            out.push(d);
            continue;
        }
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every run below `root`.
pub fn collect_curves(root: &Path) -> Result<Vec<Curve>> {
    find_runs(root)?
        .into_iter()
        .map(|dir| {
            let cfg = RunConfig::from_json_file(dir.join("config.json"))?;
            let rows = read_metrics(dir.join("metrics.csv"))?;
            Ok(Curve {
                name: cfg.name,
                mode: cfg.trainer.mode.to_string(),
                seed: cfg.trainer.seed,
                rewards: rows.iter().map(|r| r.mean_reward).collect(),
                dir,
            })
        })
        .collect()
}

/// Long-form CSV: one row per run and update.
pub fn curves_csv(curves: &[Curve]) -> String {
    let mut out = String::from("run,name,mode,seed,update,mean_reward\n");
    for c in curves {
        for (i, r) in c.rewards.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.dir.display(),
                c.name,
                c.mode,
                c.seed,
                i,
                r
            );
        }
    }
    out
}

/// Per-update median over the curves of `mode`, up to the longest run.
pub fn median_curve(curves: &[Curve], mode: &str) -> Vec<f64> {
    let sel: Vec<&Curve> = curves.iter().filter(|c| c.mode == mode).collect();
    let len = sel.iter().map(|c| c.rewards.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let col: Vec<f64> = sel
                .iter()
                .filter_map(|c| c.rewards.get(i).copied())
                .collect();
            median(&col).unwrap_or(f64::NAN)
        })
        .collect()
}

fn color(mode: &str) -> &'static str {
    match mode {
        "vanilla" => "#1f77b4",
        "vmr" => "#d62728",
        _ => "#555555",
    }
}

/// Line chart: thin per-run lines colored by mode, thick per-mode medians.
pub fn curves_svg(curves: &[Curve]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const PAD: f64 = 50.0;
    let finite = || {
        curves
            .iter()
            .flat_map(|c| c.rewards.iter().copied())
            .filter(|r| r.is_finite())
    };
    let (mut lo, mut hi) = (
        finite().fold(f64::INFINITY, f64::min),
        finite().fold(f64::NEG_INFINITY, f64::max),
    );
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let len = curves
        .iter()
        .map(|c| c.rewards.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (len - 1) as f64;
    let y = |r: f64| H - PAD - (H - 2.0 * PAD) * (r - lo) / (hi - lo);
    let path = |rs: &[f64]| {
        let mut d = String::new();
        let mut pen_up = true;
        for (i, r) in rs.iter().enumerate() {
            if !r.is_finite() {
                pen_up = true;
                continue;
            }
            let _ = write!(
                d,
                "{}{:.2},{:.2} ",
                if pen_up { "M" } else { "L" },
                x(i),
                y(*r)
            );
            pen_up = false;
        }
        d
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} L{PAD},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-size="12">{lo:.3}</text>"#,
        H - PAD + 15.0
    );
    let _ = writeln!(s, r#"<text x="5" y="{PAD}" font-size="12">{hi:.3}</text>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12">update ({})</text>"#,
        W / 2.0 - 30.0,
        H - 10.0,
        len - 1
    );
    for c in curves {
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{}" stroke-opacity="0.25" stroke-width="1"/>"#,
            path(&c.rewards),
            color(&c.mode)
        );
    }
    let mut modes: Vec<&str> = curves.iter().map(|c| c.mode.as_str()).collect();
    modes.sort_unstable();
    modes.dedup();
    for (k, m) in modes.iter().enumerate() {
        let med = median_curve(curves, m);
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="2.5"/>"#,
            path(&med),
            color(m)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="13" fill="{}">{m} (median)</text>"#,
            W - PAD - 110.0,
            PAD + 16.0 * (k as f64 + 1.0),
            color(m)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(mode: &str, rewards: Vec<f64>) -> Curve {
        Curve {
            dir: PathBuf::from(mode),
            name: "x".into(),
            mode: mode.into(),
            seed: 0,
            rewards,
        }
    }

    #[test]
    fn median_per_update() {
        let cs = vec![
            curve("vmr", vec![0.0, 1.0]),
            curve("vmr", vec![2.0, 3.0, 4.0]),
            curve("vmr", vec![1.0, 2.0]),
            curve("vanilla", vec![9.0]),
        ];
        assert_eq!(median_curve(&cs, "vmr"), vec![1.0, 2.0, 4.0]);
        assert_eq!(median_curve(&cs, "vanilla"), vec![9.0]);
    }

    #[test]
    fn outputs_have_expected_shape() {
        let cs = vec![
            curve("vmr", vec![0.0, 1.0, f64::NAN]),
            curve("vanilla", vec![0.5, 0.5, 0.5]),
        ];
        let csv = curves_csv(&cs);
        assert_eq!(csv.lines().count(), 7);
        let svg = curves_svg(&cs);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("(median)").count(), 2);
        assert!(!svg.contains("NaN"));
    }
}
