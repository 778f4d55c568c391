use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmnav::mst::{ActionKind, MemoryBank};

const BIN: &str = env!("CARGO_BIN_EXE_mmnav");

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{"num_slides": 8, "synth": {{"base_size": 64}}, "train": {{"steps": 2}},
            "classifier": {{"epochs": 3}}, "output_dir": {:?} {extra}}}"#,
        dir.join("run")
    );
    fs::write(&path, text).unwrap();
    path
}

fn mmnav(cfg: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "");
    let a = t.path().join("a");
    let b = t.path().join("b");
    for d in [&a, &b] {
        let o = mmnav(&cfg, &["--seed", "1", "synth", "-n", "4", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 4);
    assert_eq!(ta, tb);
}

#[test]
fn synth_zero_slides_and_validation() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "");
    let out = t.path().join("empty");
    let o = mmnav(&cfg, &["synth", "-n", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["slides"].as_array().unwrap().len(), 0);

    let o = mmnav(&cfg, &["--set", "synth.level_factor=1", "synth", "--out", t.path().join("bad").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("level_factor"), "{}", stderr(&o));

    // non-empty output without --force
    let o = mmnav(&cfg, &["synth", "-n", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = mmnav(&cfg, &["--force", "synth", "-n", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifacts_name_the_producer() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "");
    let o = mmnav(&cfg, &["train-cmt"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("mmnav synth"));
    assert_eq!(code(&mmnav(&cfg, &["synth", "-n", "2"])), 0);
    let o = mmnav(&cfg, &["navigate"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("mmnav train-cmt"));
    let o = mmnav(&cfg, &["classify"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("mmnav navigate"));
    let o = mmnav(&cfg, &["navigate", "--oracle", "--backend", "scripted:nonsense"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oracle_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), r#", "backend": {"selection": "scripted:move_twice_then_zoom"}"#);
    let run = t.path().join("run");
    assert_eq!(code(&mmnav(&cfg, &["synth"])), 0);

    let o = mmnav(&cfg, &["--jobs", "2", "navigate", "--oracle"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let traces = run.join("navigate/traces");
    let files: Vec<_> = fs::read_dir(&traces).unwrap().collect();
    assert_eq!(files.len(), 8);
    for f in files {
        let bank = MemoryBank::from_jsonl(&fs::read_to_string(f.unwrap().path()).unwrap()).unwrap();
        assert!(bank.len() <= 8);
        let last = bank.records.last().unwrap();
        assert!(last.action.kind() == ActionKind::Stop || bank.len() == 8);
    }

    let o = mmnav(&cfg, &["evaluate", "--oracle"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("evaluate/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * 5 + 5 + 1);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let rho: f64 = f[2].parse().unwrap();
        let jsd: f64 = f[4].parse().unwrap();
        assert!((rho - 1.0).abs() < 1e-9, "{r}");
        assert!(jsd.abs() < 1e-9, "{r}");
    }

    let o = mmnav(&cfg, &["classify", "--budgets", "0.2,1.0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(run.join("classify/budget_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "sampling,mab,cmb_l,cmb_h,budget,auc_mean,auc_std");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(run.join("classify/abmil.ckpt").exists());

    let trace = traces.join("slide-0002.jsonl");
    let o = mmnav(&cfg, &["render", "--slide", "slide-0002", "--oracle", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p = mmnav::pyramid::load_pyramid(&run.join("data/slide-0002")).unwrap();
    for m in 0..p.num_levels() {
        let img = image::open(run.join(format!("render/slide-0002_level{m}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), p.rasters[m].dimensions());
    }
    let o = mmnav(&cfg, &["render", "--slide", "slide-0001", "--trace", trace.to_str().unwrap(), "--force"]);
    assert_eq!(code(&o), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("classify/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 9);
    assert!(manifest["config_hash"].is_string());
}

#[test]
fn trained_checkpoint_and_hash_checks() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), r#", "num_slides": 2"#);
    assert_eq!(code(&mmnav(&cfg, &["synth"])), 0);
    let o = mmnav(&cfg, &["train-cmt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mmnav(&cfg, &["evaluate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = mmnav(&cfg, &["navigate", "--backend", "scripted:zoom_all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // a different seed changes the hash of the current config
    let o = mmnav(&cfg, &["--seed", "9", "--force", "evaluate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--allow-mixed"));
    let o = mmnav(&cfg, &["--seed", "9", "--force", "--allow-mixed", "evaluate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unreachable_remote_backend_exits_4() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(
        t.path(),
        r#", "num_slides": 1, "backend": {"selection": "remote",
            "remote": {"endpoint": "http://127.0.0.1:9/v1/chat/completions", "retries": 0, "backoff_ms": 0,
                       "timeout_secs": 1, "api_key_env": "MMNAV_TEST_UNSET_KEY"}}"#,
    );
    assert_eq!(code(&mmnav(&cfg, &["synth"])), 0);
    let o = mmnav(&cfg, &["navigate", "--oracle"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // the partial trace keeps its header line
    let trace = t.path().join("run/navigate/traces/slide-0000.jsonl");
    assert!(fs::read_to_string(trace).unwrap().lines().count() >= 1);
}
