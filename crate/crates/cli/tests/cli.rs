use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn varl(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varl"))
        .args(args)
        .env("VARL_RUNS_DIR", runs)
        .output()
        .expect("spawn varl")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str =
    r#"{"name":"tiny","trainer":{"updates":8,"group_size":4,"batch_size":2,"lr":10}}"#;

fn run_dirs(root: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = fs::read_dir(root.join("tiny"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn train_writes_a_self_describing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let runs = tmp.path().join("runs");
    let out = varl(
        &runs,
        &[
            "train", "--config", &cfg, "--mode", "vanilla", "--seed", "7",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["mode"], "vanilla");
    assert_eq!(summary["seed"], 7);
    let dirs = run_dirs(&runs);
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0]
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .ends_with("-7"));
    for f in ["config.json", "metrics.csv", "params.json", "report.json"] {
        assert!(dirs[0].join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(dirs[0].join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "update,phase,mean_reward,mean_vmr,loss,kl,clipped_frac,grad_norm"
    );
    assert_eq!(metrics.lines().count(), 9);

    // Re-running the recorded config reproduces the metrics byte for byte.
    let recorded = dirs[0].join("config.json");
    let again = varl(&runs, &["train", "--config", recorded.to_str().unwrap()]);
    assert!(again.status.success());
    let dirs = run_dirs(&runs);
    assert_eq!(dirs.len(), 2);
    assert_eq!(
        fs::read(dirs[0].join("metrics.csv")).unwrap(),
        fs::read(dirs[1].join("metrics.csv")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let bad = write(tmp.path(), "bad.json", r#"{"trainer":{"group_size":1}}"#);
    assert_eq!(
        varl(&runs, &["train", "--config", &bad]).status.code(),
        Some(3)
    );
    let unknown = write(
        tmp.path(),
        "unknown.json",
        r#"{"trainer":{"no_such_field":1}}"#,
    );
    assert_eq!(
        varl(&runs, &["train", "--config", &unknown]).status.code(),
        Some(3)
    );
    let missing = tmp.path().join("missing.json");
    assert_eq!(
        varl(&runs, &["train", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        varl(&runs, &["train", "--config", &bad, "--mode", "other"])
            .status
            .code(),
        Some(3)
    );

    // A penalty weight near the float limit overflows the batch reward mean.
    let diverge = write(
        tmp.path(),
        "diverge.json",
        r#"{"name":"tiny","task":{"reward":{"lambda":1e308}},"trainer":{"updates":5,"group_size":4,"batch_size":2}}"#,
    );
    let out = varl(&runs, &["train", "--config", &diverge]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run_dirs(&runs)[0].join("failure.json").is_file());
}

#[test]
fn curves_export_csv_and_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL);
    let runs = tmp.path().join("runs");
    for mode in ["vanilla", "vmr"] {
        assert!(varl(&runs, &["train", "--config", &cfg, "--mode", mode])
            .status
            .success());
    }
    let out_dir = tmp.path().join("plots");
    let out = varl(&runs, &["curves", "--out", out_dir.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 8);
    let svg = fs::read_to_string(out_dir.join("curves.svg")).unwrap();
    assert!(svg.contains("vanilla (median)") && svg.contains("vmr (median)"));
}

#[test]
fn sweep_writes_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(
        tmp.path(),
        "sweep.json",
        &format!(
            r#"{{"name":"abl","base":{SMALL},"axis":"mode","values":["vmr"],"seeds":[0,1,2]}}"#
        ),
    );
    let runs = tmp.path().join("runs");
    let out = varl(&runs, &["sweep", "--spec", &spec]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("mode,seeds,failures,reached,"));
    assert!(lines[1].starts_with("vmr,3,0,"));
    let sweeps: Vec<_> = fs::read_dir(runs.join("abl")).unwrap().collect();
    assert_eq!(sweeps.len(), 1);
    assert_eq!(fs::read_dir(runs.join("abl-mode-vmr")).unwrap().count(), 3);

    let few = write(
        tmp.path(),
        "few.json",
        r#"{"name":"x","axis":"mode","values":["vmr"],"seeds":[0]}"#,
    );
    assert_eq!(
        varl(&runs, &["sweep", "--spec", &few]).status.code(),
        Some(3)
    );
}

#[test]
fn verify_default_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = varl(tmp.path(), &["verify"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let p = write(
        tmp.path(),
        "p.json",
        r#"{"etas":[0.01],"instances":2,"policies":5}"#,
    );
    assert!(varl(tmp.path(), &["verify", "--problem", &p])
        .status
        .success());
    let bad = write(tmp.path(), "bad.json", r#"{"vocab":1}"#);
    assert_eq!(
        varl(tmp.path(), &["verify", "--problem", &bad])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn reward_score_reads_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write(
        tmp.path(),
        "in.jsonl",
        "{\"gt\":[\"cat\"],\"pred\":[\"cat\"],\"conf\":[1.0]}\n\n{\"gt\":[\"ab\"],\"pred\":[\"abcd\"],\"conf\":[1.0]}\n",
    );
    let out = varl(tmp.path(), &["reward", "score", "--in", &input]);
    assert!(out.status.success());
    let rows: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["total"], 2.0);
    assert!((rows[1]["pen"].as_f64().unwrap() - 0.2).abs() < 1e-12);

    let mut child = Command::new(env!("CARGO_BIN_EXE_varl"))
        .args(["reward", "score", "--in", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"gt\":[\"x\"],\"pred\":[],\"conf\":[]}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);

    let broken = write(tmp.path(), "broken.jsonl", "not json\n");
    assert_eq!(
        varl(tmp.path(), &["reward", "score", "--in", &broken])
            .status
            .code(),
        Some(3)
    );
}
