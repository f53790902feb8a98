use std::path::{Path, PathBuf};
use std::process::Command;

use slowfast_core::model::Model;
use slowfast_core::video::read_frames;

const TOY: &str = r#"
[world]
tile_px = 2
border_px = 1

[chunks]
f_p = 2
f_g = 2

[schedule]
sample_steps = 4

[model]
channels = 8
groups = 4
emb_dim = 16
time_dim = 16

[data]
episodes = 2
episode_len = 8

[slow]
batch = 2
steps = 4
lr = 1e-3
f_p_choices = [1, 2]
checkpoint_every = 2
log_every = 1

[fast]
rank = 2
lr = 1e-3
k = 2

[loop]
episodes = 2
chunks = 2
batch = 2
lr = 1e-3

[planner]
legs = 2
horizon = 2

[metrics]
calibration_transitions = 200
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slowfast"));
    c.env("RUST_LOG", "warn");
    c
}

fn toy_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, TOY).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Trains the toy model once per test that needs a checkpoint.
fn trained(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("slow");
    assert_eq!(run(&["--config", s(cfg), "train-slow", "--heldout-episodes", "0", "--out", s(&out)]), 0);
    out.join("model.sfvg")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["gen-data", "--bogus"]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "[fast]\nrnak = 3\n").unwrap();
    assert_eq!(run(&["--config", s(&bad), "gen-data", "--out", s(&d.path().join("o"))]), 2);
    std::fs::write(&bad, "[world]\nview = 4\n").unwrap();
    assert_eq!(run(&["--config", s(&bad), "gen-data", "--out", s(&d.path().join("o"))]), 2);
    let missing = d.path().join("missing.toml");
    assert_eq!(run(&["--config", s(&missing), "gen-data", "--out", s(&d.path().join("o"))]), 2);
    let cfg = toy_config(d.path());
    let args = ["--config", s(&cfg), "eval", "--metrics", "lpips", "--video", ".", "--out", "."];
    assert_eq!(run(&args), 1, "frames are read before metrics are checked");
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let missing = d.path().join("none.sfvg");
    let out = d.path().join("g");
    assert_eq!(
        run(&["--config", s(&cfg), "generate", "--checkpoint", s(&missing), "--actions", "noop", "--out", s(&out)]),
        1
    );
}

#[test]
fn gen_data_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["--config", s(&cfg), "gen-data", "--seed", "7", "--episodes", "3", "--out", s(out)]), 0);
    }
    let x = dir_bytes(&a);
    assert!(x.iter().any(|(n, _)| n == "manifest.json"));
    assert!(x.len() > 3);
    assert_eq!(x, dir_bytes(&b));
    let c = d.path().join("c");
    assert_eq!(run(&["--config", s(&cfg), "gen-data", "--seed", "8", "--episodes", "3", "--out", s(&c)]), 0);
    assert_ne!(x, dir_bytes(&c));
}

#[test]
fn ground_truth_revisit_benchmark_scores_100() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let bench = d.path().join("bench");
    assert_eq!(
        run(&["--config", s(&cfg), "gen-data", "--kind", "revisit", "--length", "24", "--seed", "3", "--out", s(&bench)]),
        0
    );
    assert_eq!(read_frames(&bench.join("frames")).unwrap().len(), 25);
    let out = d.path().join("eval");
    let frames = bench.join("frames");
    let ann = bench.join("annotation.json");
    let args = [
        "--config", s(&cfg), "eval", "--metrics", "psnr,ssim,scuts,src", "--video", s(&frames), "--reference", s(&frames),
        "--annotation", s(&ann), "--out", s(&out),
    ];
    assert_eq!(run(&args), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["src"], 100.0);
    assert_eq!(r["psnr"], 99.0);
    assert_eq!(r["scuts"], 0);
    assert_eq!(r["frames"], 25);
    let args = ["--config", s(&cfg), "eval", "--metrics", "src", "--video", s(&frames), "--out", s(&out)];
    assert_eq!(run(&args), 2);
}

#[test]
fn train_slow_outputs_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let full = d.path().join("full");
    assert_eq!(run(&["--config", s(&cfg), "train-slow", "--heldout-episodes", "1", "--out", s(&full)]), 0);
    for f in ["model.sfvg", "train_state.sfvg", "loss.csv", "validation.json"] {
        assert!(full.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(full.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss\n"));
    assert_eq!(csv.lines().count(), 6);

    let again = d.path().join("again");
    assert_eq!(run(&["--config", s(&cfg), "train-slow", "--heldout-episodes", "0", "--out", s(&again)]), 0);
    assert_eq!(std::fs::read(full.join("model.sfvg")).unwrap(), std::fs::read(again.join("model.sfvg")).unwrap());

    let half = d.path().join("half");
    assert_eq!(run(&["--config", s(&cfg), "train-slow", "--steps", "2", "--heldout-episodes", "0", "--out", s(&half)]), 0);
    let resumed = d.path().join("resumed");
    let state = half.join("train_state.sfvg");
    assert_eq!(
        run(&["--config", s(&cfg), "train-slow", "--resume", s(&state), "--heldout-episodes", "0", "--out", s(&resumed)]),
        0
    );
    let a = Model::load(&full.join("model.sfvg")).unwrap();
    let b = Model::load(&resumed.join("model.sfvg")).unwrap();
    assert_eq!(a.params.content_hash(), b.params.content_hash());
}

#[test]
fn generate_fast_learn_and_ablation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let model = trained(d.path(), &cfg);
    let acts = "move_forward,turn_left,strafe_right";
    let ep = |cmd: &str, extra: &[&str], out: &Path| {
        let mut args = vec!["--config", s(&cfg), cmd, "--checkpoint", s(&model), "--actions", acts, "--world-seed", "4"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", s(out)]);
        run(&args)
    };
    let (with, without, plain) = (d.path().join("with"), d.path().join("without"), d.path().join("plain"));
    assert_eq!(ep("fast-learn", &["--templora"], &with), 0);
    assert_eq!(ep("fast-learn", &["--no-templora"], &without), 0);
    assert_eq!(ep("generate", &[], &plain), 0);
    let vw = read_frames(&with.join("frames")).unwrap();
    let vo = read_frames(&without.join("frames")).unwrap();
    let vp = read_frames(&plain.join("frames")).unwrap();
    assert_eq!(vw.len(), 7);
    assert_eq!(vw.slice(0, 3).data(), vo.slice(0, 3).data());
    assert_eq!(vo.data(), vp.data());
    assert_eq!(std::fs::read_dir(with.join("templora_snapshots")).unwrap().count(), 4);
    assert!(!without.join("templora_snapshots").exists());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(with.join("episode_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["chunks"], 3);
    assert_eq!(ep("fast-learn", &["--templora", "--no-templora"], &with), 2);
    let args = ["--config", s(&cfg), "generate", "--checkpoint", s(&model), "--actions", "fly", "--out", s(&plain)];
    assert_eq!(run(&args), 2);
}

#[test]
fn loop_and_plan_commands() {
    let d = tempfile::tempdir().unwrap();
    let cfg = toy_config(d.path());
    let model = trained(d.path(), &cfg);
    let out = d.path().join("loop");
    let args = ["--config", s(&cfg), "loop", "--checkpoint", s(&model), "--heldout-episodes", "1", "--out", s(&out)];
    assert_eq!(run(&args), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("loop_report.json")).unwrap()).unwrap();
    assert_eq!(r["report"]["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(r["report"]["epochs"][0]["ds_size"], 4);
    assert!(r["heldout_loss_after"].as_f64().unwrap().is_finite());
    assert!(out.join("ds/epoch_0/episode_1/iter_1/theta.bin").is_file());
    assert!(out.join("model.sfvg").is_file());

    let plan = d.path().join("plan");
    let args = ["--config", s(&cfg), "plan", "--seed", "3", "--env-generator", "--oracle-decoder", "--out", s(&plan)];
    assert_eq!(run(&args), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(plan.join("plan_report.json")).unwrap()).unwrap();
    assert_eq!(r["distance"], 0.0);
    assert_eq!(r["executed"].as_array().unwrap().len(), 8);

    let plan2 = d.path().join("plan2");
    let args = ["--config", s(&cfg), "plan", "--seed", "3", "--checkpoint", s(&model), "--oracle-decoder", "--out", s(&plan2)];
    assert_eq!(run(&args), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(plan2.join("plan_report.json")).unwrap()).unwrap();
    assert!(r["distance"].as_f64().unwrap() >= 0.0);
    let args = ["--config", s(&cfg), "plan", "--oracle-decoder", "--out", s(&plan2)];
    assert_eq!(run(&args), 2);
}
