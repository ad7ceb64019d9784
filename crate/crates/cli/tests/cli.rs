use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
height = 16
width = 16
count = 3
n_hubs = 2
replicas_per_hub = 2

[codec]
base_channels = 8
steps = 3

[unet]
base_channels = 8
channel_multipliers = [1, 2]
attention_scales = [2]
heads = 2

[diffusion]
timesteps = 6
beta_start = 0.001
beta_end = 0.2

[train]
steps = 3
batch_size = 4
"#;

fn vton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vton")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vton(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vton(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vton(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vton(&[]).status.code(), Some(1));
    assert_eq!(vton(&["schedule-dump", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(vton(&["schedule-dump", "--set", "train.steps"]).status.code(), Some(1));
    assert_eq!(vton(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = vton(&["sample", "--person", "a.ppm", "--garment", "b.ppm", "--ckpt", s(&missing), "--out", "o.ppm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schedule_dump_rows() {
    let out = ok(&["schedule-dump", "--T", "1000"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,beta,alpha,alpha_bar,posterior_var"));
    assert_eq!(lines.count(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("sched.csv");
    ok(&["schedule-dump", "--out", s(&file)]);
    assert_eq!(std::fs::read_to_string(&file).unwrap().lines().count(), 201);
    assert!(dir.path().join("effective_config.toml").exists());
}

#[test]
fn print_defaults_reflects_overrides() {
    let out = ok(&["--print-defaults", "--set", "train.steps=77", "--seed", "5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = vton_core::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.train.steps, 77);
    assert_eq!(cfg.data.seed, 5);
    assert_eq!(cfg.sample.seed, 5);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, codec, run, sample) = (d.join("data"), d.join("codec"), d.join("run"), d.join("sample"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-codec", "--config", s(&cfg), "--data", s(&data), "--out", s(&codec)]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--codec",
        s(&codec.join("codec.ckpt")),
        "--out",
        s(&run),
    ]);
    for f in ["model.ckpt", "train_log.csv", "effective_config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    std::fs::create_dir_all(&sample).unwrap();
    let out = sample.join("out.ppm");
    let grid = sample.join("grid.ppm");
    let ckpt = run.join("model.ckpt");
    let person = data.join("images/P_0000.ppm");
    let garment = data.join("images/G_0001.ppm");
    ok(&[
        "sample",
        "--person",
        s(&person),
        "--garment",
        s(&garment),
        "--ckpt",
        s(&ckpt),
        "--s",
        "2",
        "--out",
        s(&out),
        "--grid",
        s(&grid),
    ]);
    assert_eq!(vton_core::Image::read_ppm(&out).unwrap().dims(), (16, 16));
    assert_eq!(vton_core::Image::read_ppm(&grid).unwrap().dims(), (16, 48));
    // checkpoint-fixed keys cannot be overridden at sampling time
    let bad = vton(&[
        "sample",
        "--set",
        "unet.heads=4",
        "--person",
        s(&person),
        "--garment",
        s(&garment),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let eval = d.join("eval");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--mode", "unpaired", "--out", s(&eval)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "unpaired");
    assert_eq!(report["n"], 3);

    // resuming continues the step count
    let more = d.join("more");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "train.steps=5",
        "--data",
        s(&data),
        "--codec",
        s(&codec.join("codec.ckpt")),
        "--resume",
        s(&ckpt),
        "--out",
        s(&more),
    ]);
    let log = std::fs::read_to_string(more.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().nth(1).unwrap().split(',').next(), Some("3"));
}
