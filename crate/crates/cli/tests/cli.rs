use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
iterations = 4
batch_size = 2
working_resolution = [32, 32]
checkpoint_every = 0

[generator]
base_channels = 4
max_channels = 16
num_residual_blocks = 1
predict_mask = true

[discriminator]
base_channels = 4
max_channels = 16

[perceptual]
backend = "random"
"#;

fn chargan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chargan"))
        .args(args)
        .env_remove("CHARGAN_LPIPS_WEIGHTS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/stick-figure")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a small dataset and trains a tiny model on it.
fn trained(dir: &Path, poses: usize) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&chargan(&["synth", "--out", s(&data), "--poses", &poses.to_string(), "--size", "64", "--seed", "1"]));
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    ok(&chargan(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run)]));
    (data, run.join("model.safetensors"))
}

#[test]
fn validate_accepts_the_fixture() {
    let out = ok(&chargan(&["validate", "--data", s(&fixture())]));
    assert!(out.starts_with("ok: 10 samples"), "{out}");
    assert!(out.contains("masks: yes"));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(chargan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(chargan(&["train", "--data"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = chargan(&["validate", "--data", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = chargan(&["serve", "--checkpoints", s(dir.path()), "--device", "cuda"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_the_documented_flags() {
    let help = ok(&chargan(&["generate", "--help"]));
    for flag in ["--checkpoint", "--pose", "--out", "--mask-fix", "--delta", "--max-fix-iters"] {
        assert!(help.contains(flag), "generate --help lacks {flag}");
    }
    let help = ok(&chargan(&["train", "--help"]));
    for flag in ["--data", "--config", "--out", "--iterations", "--seed", "--resolution"] {
        assert!(help.contains(flag), "train --help lacks {flag}");
    }
    let help = ok(&chargan(&["serve", "--help"]));
    for flag in ["--checkpoints", "--port", "--device"] {
        assert!(help.contains(flag), "serve --help lacks {flag}");
    }
}

#[test]
fn train_generate_and_animate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 3);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(ckpt.with_file_name("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let pose = data.join("frames/pose_000.keypoints.json");
    let png = dir.path().join("out.png");
    let mask = dir.path().join("mask.png");
    ok(&chargan(&["generate", "--checkpoint", s(&ckpt), "--pose", s(&pose), "--out", s(&png), "--mask-out", s(&mask)]));
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
    assert!(mask.exists());

    // mask repair from a reference pose
    let from = data.join("frames/pose_001.keypoints.json");
    let fixed = dir.path().join("fixed.png");
    let pose_out = dir.path().join("fixed.json");
    ok(&chargan(&[
        "generate", "--checkpoint", s(&ckpt), "--pose", s(&pose), "--from", s(&from), "--out", s(&fixed),
        "--pose-out", s(&pose_out), "--mask-fix", "--delta", "0.5", "--max-fix-iters", "2",
    ]));
    assert!(fixed.exists() && pose_out.exists());

    let timeline = dir.path().join("timeline.json");
    std::fs::write(
        &timeline,
        serde_json::json!({
            "fps": 10,
            "keyframes": [
                {"time": 0.0, "pose_file": s(&data.join("frames/pose_000.keypoints.json"))},
                {"time": 1.0, "pose_file": s(&data.join("frames/pose_002.keypoints.json"))}
            ]
        })
        .to_string(),
    )
    .unwrap();
    let gif_path = dir.path().join("anim.gif");
    ok(&chargan(&["animate", "--checkpoint", s(&ckpt), "--timeline", s(&timeline), "--out", s(&gif_path)]));
    let mut dec = gif::DecodeOptions::new().read_info(std::fs::File::open(&gif_path).unwrap()).unwrap();
    let mut frames = 0;
    while dec.read_next_frame().unwrap().is_some() {
        frames += 1;
    }
    assert_eq!(frames, 11);

    let seq = dir.path().join("seq");
    ok(&chargan(&["animate", "--checkpoint", s(&ckpt), "--timeline", s(&timeline), "--format", "png", "--fps", "5", "--out", s(&seq)]));
    assert_eq!(std::fs::read_dir(&seq).unwrap().count(), 6);
}

#[test]
fn schema_hash_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 3);
    let text = std::fs::read_to_string(data.join("frames/pose_000.keypoints.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["schema_hash"] = serde_json::Value::String("0".repeat(64));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let out = chargan(&["generate", "--checkpoint", s(&ckpt), "--pose", s(&bad), "--out", s(&dir.path().join("x.png"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn leave_one_out_on_three_samples_gives_three_folds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&chargan(&["synth", "--out", s(&data), "--poses", "3", "--size", "64"]));
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let report = dir.path().join("report.json");
    ok(&chargan(&[
        "eval", "--data", s(&data), "--config", s(&cfg), "--runs", "1", "--iterations", "10", "--json", s(&report),
    ]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let folds = v["runs"][0]["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    let held: Vec<u64> = folds.iter().map(|f| f["held_out"].as_u64().unwrap()).collect();
    assert_eq!(held, vec![0, 1, 2]);
    assert!(folds.iter().all(|f| f["psnr"].as_f64().unwrap().is_finite()));
    // no LPIPS weights are configured in tests
    assert!(v["lpips"].is_null());
}
