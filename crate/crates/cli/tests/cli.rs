use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
schema_version = 1
[scene]
grid = 2
fine_factor = 2
years = [2017, 2018, 2019]
sample_stride = 6
[train]
width = 2
hidden = 2
batch_size = 8
lr_schedule = [{ epochs = 1, lr = 1e-2 }]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floodfuse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

/// Exit code and the parsed one-line diagnostic.
fn fail(args: &[&str]) -> (i32, Value) {
    let out = run(args);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().expect("a diagnostic line");
    (out.status.code().unwrap(), serde_json::from_str(line).expect("diagnostic is JSON"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = ok(&["--config", s(&cfg), "synth", "--seed", "7", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "synth", "--seed", "7", "--out", s(&b)]);
    assert_eq!(summary["chips"], 96);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 2 * 96 + 2);
    assert!(ta == tb);
    let c = dir.path().join("c");
    ok(&["--config", s(&cfg), "synth", "--seed", "8", "--out", s(&c)]);
    assert!(tree(&c) != ta);
}

#[test]
fn ingest_rebuilds_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d");
    ok(&["--config", s(&cfg), "synth", "--out", s(&data)]);
    fs::remove_file(data.join("manifest.json")).unwrap();
    let summary = ok(&["ingest", "--dir", s(&data)]);
    assert_eq!(summary["complete"], 96);
    assert_eq!(summary["year_counts"]["2018"], 32);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, diag) = fail(&["eval", "--checkpoint", "/no/such.ckpt", "--data", s(dir.path())]);
    assert_eq!((code, diag["error"].as_str()), (3, Some("not_found")));

    let (code, diag) = fail(&["--config", s(&dir.path().join("absent.toml")), "synth"]);
    assert_eq!((code, diag["error"].as_str()), (3, Some("not_found")));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[scene]\nseed = 1\nclouds = 0.3\n").unwrap();
    let (code, diag) = fail(&["--config", s(&bad), "synth", "--out", s(dir.path())]);
    assert_eq!(code, 2);
    assert_eq!(diag["path"], "scene.clouds");

    fs::write(&bad, "[train]\nlr_schedule = [{ epochs = 1, lr = 1e-3 }, { epochs = 1, lr = 1e-2 }]\n").unwrap();
    let (code, diag) = fail(&["--config", s(&bad), "cv", "--data", s(dir.path())]);
    assert_eq!((code, diag["path"].as_str()), (2, Some("train")));

    let (code, diag) = fail(&["cv", "--lr-schedule", "20;1e-3"]);
    assert_eq!((code, diag["path"].as_str()), (2, Some("train.lr_schedule")));

    let (code, diag) = fail(&["infer", "--exclude", "2002-05-01"]);
    assert_eq!((code, diag["path"].as_str()), (2, Some("infer.exclude")));

    let (code, diag) = fail(&["frobnicate"]);
    assert_eq!((code, diag["error"].as_str()), (2, Some("usage")));

    let (code, _) = fail(&["train", "--year", "2019", "--data", s(dir.path())]);
    assert_eq!(code, 3);

    let out = run(&["--help"]);
    assert!(out.status.success());
}

#[test]
fn gradcheck_reports_every_op() {
    let out = run(&["gradcheck", "--seeds", "1"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 11);
    assert!(lines[..lines.len() - 1].iter().all(|l| l["passed"] == true));
}

#[test]
fn cv_then_infer_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (data, runs, out) = (dir.path().join("data"), dir.path().join("runs"), dir.path().join("out"));
    ok(&["--config", s(&cfg), "synth", "--out", s(&data)]);
    let summary = ok(&["--config", s(&cfg), "cv", "--model", "both", "--data", s(&data), "--runs", s(&runs)]);
    assert_eq!(summary["folds"].as_array().unwrap().len(), 6);

    let table = fs::read_to_string(runs.join("cv_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "year,fusion_r2,fusion_slope,fusion_spearman,fusion_rmse,baseline_r2,baseline_slope,baseline_spearman,baseline_rmse"
    );
    let years: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(years, ["2017", "2018", "2019"]);
    for kind in ["fusion", "baseline"] {
        for y in [2017, 2018, 2019] {
            assert!(runs.join(format!("{kind}_{y}.ckpt")).exists());
            let log = fs::read_to_string(runs.join(format!("{kind}_{y}_log.csv"))).unwrap();
            assert!(log.starts_with("epoch,phase_lr,train_rmse,val_rmse,wall_seconds"));
        }
    }

    let ev = ok(&["eval", "--checkpoint", s(&runs.join("fusion_2018.ckpt")), "--data", s(&data), "--out", s(&out.join("eval")), "--year", "2018"]);
    assert!(ev["metrics"]["rmse"].as_f64().unwrap() >= 0.0);

    let inf = ok(&["infer", "--runs", s(&runs), "--data", s(&data), "--out", s(&out.join("infer"))]);
    assert_eq!(inf["members"], 3);
    assert_eq!(inf["skipped"], 0);

    // Monsoon maxima against a scan of the emitted series.
    let series = read_csv(&out.join("infer/series.csv"));
    let mut expect: BTreeMap<String, f64> = BTreeMap::new();
    for row in &series {
        let (year, md) = (row[0][..4].to_string(), &row[0][5..]);
        if ("06-01"..="10-31").contains(&md) {
            let v: f64 = row[1].parse().unwrap();
            let e = expect.entry(year).or_insert(f64::NEG_INFINITY);
            *e = e.max(v);
        }
    }
    let maxima = read_csv(&out.join("infer/maxima.csv"));
    assert_eq!(maxima.len(), 3);
    for row in maxima {
        let got: f64 = row[1].parse().unwrap();
        assert_eq!(got, expect[&row[0]], "year {}", row[0]);
    }
    for row in &series {
        for v in &row[1..] {
            let v: f64 = v.parse().unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
    let maps = fs::read_dir(out.join("infer/maps")).unwrap().count();
    assert_eq!(maps, series.len() * 4);

    let excluded = ok(&[
        "infer",
        "--runs",
        s(&runs),
        "--data",
        s(&data),
        "--out",
        s(&out.join("excl")),
        "--exclude",
        "2018-03-01..2018-05-31",
    ]);
    assert!(excluded["skipped"].as_u64().unwrap() > 0);
}
