use std::path::Path;
use std::process::{Command, Output};

fn volrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volrecon")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn small_linear(dir: &Path) -> Vec<String> {
    ["--preset", "linear", "--out", dir.to_str().unwrap(), "--set", "phantom.dims=[16,16,16]", "--set", "phantom.density=0.05"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn with<'a>(cmd: &'a str, rest: &'a [String]) -> Vec<&'a str> {
    std::iter::once(cmd).chain(rest.iter().map(String::as_str)).collect()
}

#[test]
fn preset_list_names_every_method() {
    let out = volrecon(&["preset", "list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for m in ["microdiffusion", "naive_diffusion", "inr_only", "linear", "cubic"] {
        assert!(text.lines().any(|l| l.starts_with(m)), "{m}");
    }
    let show = volrecon(&["preset", "show", "cubic"]);
    let v: serde_json::Value = serde_json::from_slice(&show.stdout).unwrap();
    assert_eq!(v["method"], "cubic");
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(volrecon(&["evaluate", "--preset", "nope"]).status.code(), Some(2));
    assert_eq!(volrecon(&["evaluate", "--set", "diffusion.guidance.gamma=1.0"]).status.code(), Some(2));
    assert_eq!(volrecon(&["evaluate", "--preset", "microdiffusion", "--set", "diffusion.prior.mode=off"]).status.code(), Some(2));
    assert_eq!(volrecon(&["sweep", "--preset", "linear", "--axis", "depth", "--values", "1"]).status.code(), Some(2));
    assert_eq!(volrecon(&["bogus"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let args = small_linear(&blocker.join("run"));
    assert_eq!(volrecon(&with("phantom", &args)).status.code(), Some(3));
}

#[test]
fn stages_then_cached_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let args = small_linear(dir.path());
    let out = volrecon(&with("acquire", &args));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("stack.f32").exists());
    let out = volrecon(&with("evaluate", &args));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("stage phantom: cached") && text.contains("stage evaluate: done"), "{text}");
    assert!(text.contains("SSIM"));
    assert!(dir.path().join("report.json").exists() && dir.path().join("manifest.json").exists());
}

#[test]
fn config_file_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let show = volrecon(&["preset", "show", "cubic"]);
    std::fs::write(&cfg, &show.stdout).unwrap();
    let out_dir = dir.path().join("sweep");
    let out = volrecon(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
        "--set", "phantom.dims=[16,16,16]", "--set", "phantom.density=0.05",
        "--axis", "step_length", "--values", "2,4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("sweep_step_length.csv").exists());
    assert!(out_dir.join("sweep_step_length_dice.png").exists());
}
