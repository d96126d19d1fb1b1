use std::path::Path;
use std::process::{Command, Output};

fn regda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn regda")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const DATA_SPEC: &str = r#"
domain = "C"
shape = "ellipse"
keypoints = 1
image_size = 32
grid_size = 16
shape_radius = 4.0
count = 40
seed = 3

[style]
kind = "color"

[area]
h = [2, 13]
w = [2, 13]
"#;

fn train_config(pretrain: u64, adapt: u64, checkpoint_every: u64) -> String {
    format!(
        r#"
method = "regda"
seeds = [0]
batch_size = 4
eval_every = 50
eval_samples = 20
checkpoint_every = {checkpoint_every}

[model]
image_channels = 3
image_size = 32
channels = [4, 4]
strides = [2, 1]
head_width = 4
keypoints = 1
upsample = false

[source.generate]
domain = "C"
shape = "ellipse"
keypoints = 1
image_size = 32
grid_size = 16
shape_radius = 4.0
count = 60
seed = 1
style = {{ kind = "color" }}
area = {{ h = [2, 13], w = [2, 13] }}

[target.generate]
domain = "N"
shape = "ellipse"
keypoints = 1
image_size = 32
grid_size = 16
shape_radius = 4.0
count = 60
seed = 2
style = {{ kind = "noisy", amplitude = 1.0 }}
area = {{ h = [2, 13], w = [2, 13] }}

[pretrain]
iterations = {pretrain}

[adapt]
iterations = {adapt}
"#
    )
}

fn last_step(csv: &Path) -> u64 {
    let text = std::fs::read_to_string(csv).unwrap();
    let last = text.lines().last().unwrap();
    last.split(',').next().unwrap().parse().unwrap()
}

#[test]
fn gen_data_writes_layout_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, DATA_SPEC).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = regda(&["gen-data", "--config", p(&spec), "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["annotations.csv", "spec.json", "images", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("annotations.csv")).unwrap(),
        std::fs::read(b.join("annotations.csv")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seeds"][0], 3);
}

#[test]
fn gen_data_into_unwritable_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, DATA_SPEC).unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = regda(&["gen-data", "--config", p(&spec), "--out", p(&blocker.join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn gen_data_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, DATA_SPEC.replace("count = 40", "count = 0")).unwrap();
    let o = regda(&["gen-data", "--config", p(&spec), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("count"));
}

#[test]
fn train_smoke_then_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, train_config(100, 100, 0)).unwrap();
    let out = dir.path().join("run");
    let o = regda(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.csv", "report.json", "final.ckpt", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(last_step(&out.join("report.csv")), 200);

    // Evaluate on a freshly generated source-like set.
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, DATA_SPEC).unwrap();
    let data = dir.path().join("data");
    assert!(regda(&["gen-data", "--config", p(&spec), "--out", p(&data)]).status.success());
    let ev = dir.path().join("eval");
    let o = regda(&[
        "eval",
        "--checkpoint",
        p(&out.join("final.ckpt")),
        "--data",
        p(&data),
        "--out",
        p(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["alpha"], 0.05);
    assert!(ev.join("manifest.json").exists());

    let plots = dir.path().join("plots");
    let o = regda(&["plot", "--out", p(&plots), p(&out.join("report.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svgs = std::fs::read_dir(&plots)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 4);
    for f in ["series.csv", "table.csv", "table.txt", "manifest.json"] {
        assert!(plots.join(f).exists(), "{f}");
    }
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, train_config(50, 50, 50)).unwrap();
    let first = dir.path().join("first");
    let o = regda(&["train", "--config", p(&cfg), "--out", p(&first)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = first.join("step-50.ckpt");
    assert!(ckpt.exists());

    let second = dir.path().join("second");
    let o = regda(&["train", "--config", p(&cfg), "--out", p(&second), "--resume", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(second.join("report.csv")).unwrap();
    let steps: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps.first(), Some(&50));
    assert_eq!(steps.last(), Some(&100));
    assert_eq!(
        text,
        std::fs::read_to_string(first.join("report.csv")).unwrap(),
        "resumed run diverged from the uninterrupted one"
    );
}

#[test]
fn conflicting_grid_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    let text = train_config(10, 10, 0).replace("strides = [2, 1]", "strides = [1, 1]");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let o = regda(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("report.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, format!("learning_rate = 3\n{}", train_config(10, 10, 0))).unwrap();
    let o = regda(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = regda(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("missing.ckpt")),
        "--data",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_alpha_defaults_to_five_percent() {
    let o = regda(&["eval", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("default: 0.05"));
}

#[test]
fn plot_of_empty_report_fails() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run").join("report.csv");
    std::fs::create_dir_all(csv.parent().unwrap()).unwrap();
    std::fs::write(&csv, "step,phase,lr\n").unwrap();
    let o = regda(&["plot", "--out", p(&dir.path().join("plots")), p(&csv)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_passes_and_zero_eps_fails() {
    let o = regda(&["selftest", "--cases", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("grad_check loss_true"));
    assert!(text.contains("max error"));

    let o = regda(&["selftest", "--cases", "5", "--eps", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL kl oracle"));
}

#[test]
fn dump_defaults_parses_back() {
    let o = regda(&["config", "--dump-defaults"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(v["method"].as_str(), Some("regda"));
    let o = regda(&["config", "--dump-defaults", "--kind", "data"]);
    assert!(o.status.success());
}
