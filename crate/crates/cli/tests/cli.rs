use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use protocomp::training::TrainState;
use protocomp_cli::RunManifest;
use serde_json::{json, Value};
use tempfile::TempDir;

fn protocomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protocomp")).args(args).output().expect("spawn protocomp")
}

fn ok(args: &[&str]) -> Output {
    let out = protocomp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 5 scenes of 10 teeth: 20 train, 10 val, 20 test pairs.
fn tiny_config() -> Value {
    json!({
        "n_scenes": 5,
        "ratios": [0.4, 0.2, 0.4],
        "points_per_tooth": 300,
        "gingiva_points": 800,
        "n_gingiva": 64,
        "num_points": 64,
        "encoder_widths": [3, 16, 32],
        "decoder_hidden": [32, 16],
        "grid_side": 8,
        "epochs": 2,
        "batch_size": 8,
        "k": 8,
        "ablation_seeds": 2,
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

struct Fixture {
    tmp: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let config = write_config(tmp.path(), "config.json", &tiny_config());
        let data = tmp.path().join("data");
        ok(&["synth", "--config", s(&config), "--out", s(&data)]);
        Self { tmp, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--config", s(&self.config), "--data", s(&self.data), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn log_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_is_reproducible_and_names_bad_ratios() {
    let fx = Fixture::new();
    for part in ["train", "val", "test"] {
        assert!(fx.data.join(part).is_dir());
    }
    let again = fx.path("again");
    ok(&["synth", "--config", s(&fx.config), "--out", s(&again)]);
    assert_eq!(files_under(&fx.data), files_under(&again));

    let mut bad = tiny_config();
    bad["ratios"] = json!([0.5, 0.2, 0.2]);
    let bad = write_config(fx.tmp.path(), "bad.json", &bad);
    let out = protocomp(&["synth", "--config", s(&bad), "--out", s(&fx.path("bad"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratios"));
}

#[test]
fn config_errors_exit_two_and_missing_data_exits_three() {
    let tmp = TempDir::new().unwrap();
    let typo = write_config(tmp.path(), "typo.json", &json!({"epoch": 3}));
    let out = protocomp(&["synth", "--config", s(&typo), "--out", s(&tmp.path().join("a"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let out = protocomp(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = protocomp(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_pm_off_and_resume() {
    let fx = Fixture::new();
    let run = fx.path("run");
    let start = Instant::now();
    fx.train(&run, &["--seed", "3"]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let best = TrainState::load(&run.join("best.ckpt")).unwrap();
    let last = TrainState::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(last.epoch, 2);
    assert_eq!(last.config.seed, 3);
    assert!(best.epoch >= 1);
    let log = log_lines(&run.join("train_log.jsonl"));
    assert_eq!(log.iter().filter(|v| v["event"] == "epoch").count(), 2);
    let manifest = RunManifest::read(&run).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.seed, 3);
    assert!(!run.join(".protocomp.lock").exists());

    let no_pm = fx.path("no_pm");
    fx.train(&no_pm, &["--ablate", "no-pm"]);
    let steps: Vec<Value> = log_lines(&no_pm.join("train_log.jsonl")).into_iter().filter(|v| v["event"] == "step").collect();
    assert!(!steps.is_empty());
    for v in &steps {
        assert_eq!(v["loss"]["mem"].as_f64(), Some(0.0));
        assert!(v["alpha"].is_null());
    }

    let mut longer = tiny_config();
    longer["epochs"] = json!(4);
    let longer = write_config(fx.tmp.path(), "longer.json", &longer);
    let resumed = fx.path("resumed");
    ok(&[
        "train",
        "--config",
        s(&longer),
        "--seed",
        "3",
        "--data",
        s(&fx.data),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("final.ckpt")),
    ]);
    let log = log_lines(&resumed.join("train_log.jsonl"));
    let steps: Vec<u64> = log.iter().filter(|v| v["event"] == "step").map(|v| v["step"].as_u64().unwrap()).collect();
    assert_eq!(steps.first().copied(), Some(last.step + 1));
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    let epochs: Vec<u64> = log.iter().filter(|v| v["event"] == "epoch").map(|v| v["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![2, 3]);

    let out = protocomp(&[
        "train",
        "--config",
        s(&longer),
        "--data",
        s(&fx.data),
        "--out",
        s(&fx.path("bad_resume")),
        "--ablate",
        "no-de",
        "--resume",
        s(&run.join("final.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch on `use_de`"));
}

#[test]
fn eval_oracle_repeatability_dumps_and_mismatch() {
    let fx = Fixture::new();
    let oracle = fx.path("oracle");
    ok(&["eval", "--oracle", "--data", s(&fx.data), "--out", s(&oracle)]);
    let report: Value = serde_json::from_slice(&fs::read(oracle.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_cd_e4"].as_f64(), Some(0.0));
    assert_eq!(report["mean_fscore"].as_f64(), Some(1.0));
    assert_eq!(report["samples"].as_u64(), Some(20));

    let run = fx.path("run");
    fx.train(&run, &[]);
    let ckpt = run.join("best.ckpt");
    let a = fx.path("eval_a");
    let b = fx.path("eval_b");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--out", s(&a), "--dump-predictions"]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--out", s(&b)]);
    let ra = fs::read(a.join("eval_report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("eval_report.json")).unwrap());
    let report: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["use_pm"], json!(true));
    let dumped = fs::read_dir(a.join("predictions")).unwrap().count();
    assert_eq!(dumped, 20);

    let no_pm = fx.path("eval_no_pm");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--out", s(&no_pm), "--no-pm"]);
    let report: Value = serde_json::from_slice(&fs::read(no_pm.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["use_pm"], json!(false));

    let mut other = tiny_config();
    other["k"] = json!(4);
    let other = write_config(fx.tmp.path(), "other.json", &other);
    let out =
        protocomp(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt), "--data", s(&fx.data), "--out", s(&fx.path("mm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch on `K`"));
}

#[test]
fn ablate_writes_three_rows_with_seed_lists() {
    let fx = Fixture::new();
    let mut cfg = tiny_config();
    cfg["epochs"] = json!(1);
    let cfg = write_config(fx.tmp.path(), "ablate.json", &cfg);
    let out_dir = fx.path("ablation");
    let out = ok(&["ablate", "--config", s(&cfg), "--seed", "10", "--data", s(&fx.data), "--out", s(&out_dir)]);
    let rows: Value = serde_json::from_slice(&fs::read(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    let flags: Vec<(bool, bool)> =
        rows.iter().map(|r| (r["use_pm"].as_bool().unwrap(), r["use_de"].as_bool().unwrap())).collect();
    assert_eq!(flags, vec![(false, false), (true, false), (true, true)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let table: Vec<&str> = stdout.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| PM")).collect();
    assert_eq!(table.len(), 3);
    assert!(table[0].starts_with("| − | − |"));
    assert!(table[1].starts_with("| ✓ | − |"));
    assert!(table[2].starts_with("| ✓ | ✓ |"));
    for dir in ["no_pm_no_de", "pm_no_de", "pm_de"] {
        let m = RunManifest::read(&out_dir.join(dir)).unwrap();
        assert_eq!(m.seeds, vec![10, 11]);
        for seed in [10, 11] {
            assert!(out_dir.join(dir).join(format!("seed_{seed}_log.jsonl")).is_file());
        }
    }
    assert_eq!(RunManifest::read(&out_dir).unwrap().seeds, vec![10, 11]);
}

#[test]
fn embed_writes_csv_and_rho() {
    let fx = Fixture::new();
    let run = fx.path("run");
    fx.train(&run, &[]);
    let out_dir = fx.path("embed");
    let out = ok(&["embed", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&fx.data), "--out", s(&out_dir)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rho"));
    let csv = fs::read_to_string(out_dir.join("embedding.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kind,position_label,pc1,pc2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|l| l.starts_with("partial,")).count(), 20);
    assert_eq!(rows.iter().filter(|l| l.starts_with("prototype,")).count(), 8);
    let summary: Value = serde_json::from_slice(&fs::read(out_dir.join("embedding.json")).unwrap()).unwrap();
    assert!(summary["rho"].as_f64().unwrap() >= 0.0);
    assert_eq!(RunManifest::read(&out_dir).unwrap().command, "embed");
}

#[test]
fn locked_output_directory_is_refused() {
    let fx = Fixture::new();
    let out_dir = fx.path("locked");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join(".protocomp.lock"), "").unwrap();
    let out = protocomp(&["eval", "--oracle", "--data", s(&fx.data), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert!(!out_dir.join("eval_report.json").exists());
}
