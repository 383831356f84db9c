use std::path::Path;
use std::process::{Command, Output};

fn slab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slab"))
        .args(args)
        .env_remove("SLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

const TOY: &str = r#"
[model]
depth = 1
dim = 16
heads = 2
grid = { height = 2, width = 2 }
patch_size = 4
num_classes = 4

[train]
epochs = 3
batch_size = 32
warmup_epochs = 1
base_lr = 0.002

[data]
samples = 200
num_classes = 4
input_shape = [3, 8, 8]
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn train_toy(dir: &Path, body: &str, run: &str) -> (Output, std::path::PathBuf) {
    let cfg = write(dir, &format!("{run}.toml"), body);
    let out = dir.join(run);
    let o = slab(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    (o, out)
}

#[test]
fn missing_config_names_the_path() {
    let o = slab(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("/nonexistent/run.toml"));
}

#[test]
fn misspelled_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[train]\nepohcs = 3\n");
    let o = slab(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o).1;
    assert!(err.contains("epohcs") && err.contains("train"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn train_then_fuse_twice() {
    let dir = tempfile::tempdir().unwrap();
    let (o, run) = train_toy(dir.path(), TOY, "run");
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    for f in ["checkpoint.slab", "metrics.jsonl", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let last_step = metrics.lines().filter(|l| l.contains("\"kind\":\"step\"")).last().unwrap();
    assert!(last_step.contains("\"gamma\":0.0"), "{last_step}");
    assert!(metrics.lines().next().unwrap().contains("\"gamma\":1.0"));

    let ckpt = run.join("checkpoint.slab");
    let fused = dir.path().join("fused.slab");
    let o = slab(&["fuse", "--checkpoint", ckpt.to_str().unwrap(), "--out", fused.to_str().unwrap()]);
    let (out, _) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    let diff: f64 = out
        .lines()
        .find(|l| l.starts_with("max |logit diff|"))
        .and_then(|l| l.split_whitespace().nth(3))
        .and_then(|v| v.parse().ok())
        .expect("difference printed");
    assert!(diff <= 1e-4, "{diff}");

    let again = dir.path().join("fused2.slab");
    let o = slab(&["fuse", "--checkpoint", fused.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).0.contains("already fused"));
    assert_eq!(std::fs::read(&fused).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn fusing_before_the_transition_fails() {
    let dir = tempfile::tempdir().unwrap();
    let body = TOY.replace("epochs = 3", "epochs = 2\nprepbn_decay_steps = 1000");
    let (o, run) = train_toy(dir.path(), &body, "early");
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let out = dir.path().join("f.slab");
    let o = slab(&[
        "fuse",
        "--checkpoint",
        run.join("checkpoint.slab").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("converged"));
    assert!(!out.exists());
}

#[test]
fn training_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let mut ckpts = Vec::new();
    for (run, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = dir.path().join(run);
        let o = slab(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        ckpts.push(std::fs::read(out.join("checkpoint.slab")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    assert_ne!(ckpts[0], ckpts[2]);
}

#[test]
fn bench_sweep_reports_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = slab(&[
        "bench",
        "--target",
        "attention",
        "--seq-lens",
        "16,32,64,128",
        "--dim",
        "16",
        "--heads",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let slope_rows = csv.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("")).count();
    assert_eq!(slope_rows, 2, "{csv}");
    assert!(dir.path().join("r_plot.py").exists());
}

#[test]
fn bench_single_point_has_no_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = slab(&[
        "bench",
        "--seq-lens",
        "64",
        "--dim",
        "16",
        "--heads",
        "2",
        "--format",
        "json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).1.contains("notice"));
    let json = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["slope"].is_null() && r["median_ms"].is_number()));
}

#[test]
fn bench_rejects_unknown_variant() {
    let o = slab(&["bench", "--variants", "flash", "--out", "/tmp/never.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o).1;
    assert!(err.contains("softmax") && err.contains("sla"), "{err}");
}

#[test]
fn verify_lemma_and_fault_injection() {
    let o = slab(&["verify", "--suite", "lemma"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).0.contains("PASS"));
    let o = slab(&["verify", "--suite", "lemma", "--inject-eta-offset", "0.001"]);
    assert_eq!(o.status.code(), Some(1));
    let out = text(&o).0;
    assert!(out.contains("FAIL"), "{out}");
    let o = slab(&["verify", "--suite", "lemmas"]);
    assert_eq!(o.status.code(), Some(2));
}
