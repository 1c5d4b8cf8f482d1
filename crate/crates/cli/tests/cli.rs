use std::path::Path;
use std::process::{Command, Output};

fn splat4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(args)
        .env_remove("U4D_SEED")
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY_SPEC: &str = "frames = 6\nwidth = 32\nheight = 32\n[camera]\nfx = 24.0\n";
const TINY_CONFIG: &str = "iterations = 4\nholdout = [2]\neval_every = 0\n[init]\nrandom_points = 50\nmax_lidar_points = 100\n";

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn time_outside_unit_interval_is_a_validation_error() {
    let out = splat4d(&["render", "--t", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("t out of [0,1]"), "{}", text(&out.stderr));
}

#[test]
fn unknown_flags_are_rejected() {
    let out = splat4d(&["gradcheck", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = splat4d(&["gradcheck", "--module", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = splat4d(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("gradcheck"));
}

#[test]
fn gradcheck_single_module() {
    let out = splat4d(&["--threads", "1", "gradcheck", "--module", "mlp", "--cases", "20", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("# seed 7"));
    assert!(s.contains("mlp"));
}

#[test]
fn missing_files_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = splat4d(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = write(dir.path(), "bad.toml", "iterations = 3\nmystery = 1\n");
    let out = splat4d(&["train", "--data", ".", "--config", &cfg, "--out", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("mystery"));
}

#[test]
fn generate_train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "scene.toml", TINY_SPEC);
    let cfg = write(d, "train.toml", TINY_CONFIG);
    let data = d.join("data");
    let ckpt = d.join("model.ckpt");
    let png = d.join("view.png");
    let (data_s, ckpt_s, png_s) = (data.to_str().unwrap(), ckpt.to_str().unwrap(), png.to_str().unwrap());

    let out = splat4d(&["generate", "--spec", &spec, "--out", data_s]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(data.join("manifest.toml").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(["train", "--data", data_s, "--config", &cfg, "--out", ckpt_s, "--progress", "1"])
        .env("U4D_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("# seed 11"), "{s}");
    assert!(s.contains("iterations = 4"));
    let log = std::fs::read_to_string(d.join("model.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let out = splat4d(&["render", "--ckpt", ckpt_s, "--t", "0.5", "--pose", "1", "--data", data_s, "--out", png_s]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");

    let pose = write(
        d,
        "pose.toml",
        "width = 16\nheight = 12\nfx = 12.0\nfy = 12.0\ncx = 7.5\ncy = 5.5\n\
         rotation = [1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]\ntranslation = [0.0, 1.5, 0.0]\n",
    );
    let out = splat4d(&["render", "--ckpt", ckpt_s, "--t", "0", "--pose", &pose, "--out", png_s]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let out = splat4d(&["render", "--ckpt", ckpt_s, "--t", "0.2", "--pose", "99", "--data", data_s, "--out", png_s]);
    assert_eq!(out.status.code(), Some(1));

    let out = splat4d(&["eval", "--ckpt", ckpt_s, "--data", data_s, "--split", "holdout"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("frame,psnr,ssim,dynamic_pixels"));
    assert!(s.lines().any(|l| l.starts_with("2,")));
    assert!(s.contains("mean psnr"));
}
