use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("config/toy.toml")
}

fn nscm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nscm")).args(args).output().expect("binary runs")
}

fn run_toy(out: &Path, extra: &[&str]) -> Output {
    let cfg = toy_config();
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    nscm(&args)
}

/// Every artifact except the timestamped log.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "nscm.log")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn toy_pipeline_repeats_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = run_toy(dir.path(), &["--emit-plots"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let first = artifacts(a.path());
    for name in ["samples.csv", "samples.json", "network.ckpt", "verify.json", "summary.json", "plot_surface.csv"] {
        assert!(first.contains_key(name), "missing {name}");
    }
    assert_eq!(first, artifacts(b.path()));

    // Rerunning single stages in place reproduces the same files.
    for stage in ["sample", "train", "verify", "simulate"] {
        assert_eq!(code(&run_toy(a.path(), &["--stage", stage, "--emit-plots"])), 0, "stage {stage}");
        assert_eq!(artifacts(a.path()), first, "stage {stage}");
    }

    let other = tempfile::tempdir().unwrap();
    run_toy(other.path(), &["--stage", "sample", "--seed", "99"]);
    assert_ne!(std::fs::read(other.path().join("samples.csv")).unwrap(), first["samples.csv"]);
}

#[test]
fn sample_metadata_records_the_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_toy(dir.path(), &["--stage", "sample", "--grid-override", "alpha=0.3,1,3;epsilon=1:100:3"]);
    assert_eq!(code(&out), 0);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("samples.json")).unwrap()).unwrap();
    for key in ["alpha", "epsilon", "objective", "nu", "chi", "bound"] {
        assert!(meta[key].is_number(), "samples.json lacks {key}");
    }
    assert!([0.3, 1.0, 3.0].contains(&meta["alpha"].as_f64().unwrap()));
    let surface = std::fs::read_to_string(dir.path().join("surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 9);
}

#[test]
fn policy_subset_limits_the_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_toy(dir.path(), &["--stage", "sample"])), 0);
    assert_eq!(code(&run_toy(dir.path(), &["--stage", "simulate", "--policies", "sdre,mcvstem"])), 0);
    assert!(dir.path().join("trace_sdre.csv").exists());
    assert!(dir.path().join("trace_mcvstem.csv").exists());
    assert!(!dir.path().join("trace_nscm.csv").exists());
    assert_eq!(code(&run_toy(dir.path(), &["--stage", "simulate", "--policies", "nope"])), 2);
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const SCALAR: &str = r#"
[model]
kind = "cubic"
a = -1.0
k = 1.0
g = 0.1
d = 0.05
state_box = { lower = [-1.0], upper = [1.0] }
[sampling]
samples = 30
[mcvstem]
alphas = [0.3, 1.0]
epsilons = [1.0, 10.0]
"#;

#[test]
fn malformed_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        "seed = \"one\"",
        "[model]\nkind = \"cubic\"\nbogus = 1",
        &format!("{SCALAR}\n[network]\nwidths = 3"),
        &format!("{SCALAR}\n[network]\nl_m = 0.5"),
    ] {
        let cfg = write_config(dir.path(), body);
        let out = nscm(&["--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{body}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    }
    assert_eq!(code(&nscm(&["--config", "/nonexistent/cfg.toml"])), 2);
    assert_eq!(code(&nscm(&["--config", toy_config().to_str().unwrap(), "--stage", "bake"])), 2);
    assert_eq!(code(&nscm(&["--config", toy_config().to_str().unwrap(), "--grid-override", "alpha=x"])), 2);
}

#[test]
fn later_stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["train", "verify", "simulate"] {
        let out = run_toy(dir.path(), &["--stage", stage]);
        assert_eq!(code(&out), 2, "stage {stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn inflated_checkpoint_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["sample", "train"] {
        assert_eq!(code(&run_toy(dir.path(), &["--stage", stage])), 0);
    }
    assert_eq!(code(&run_toy(dir.path(), &["--stage", "verify"])), 0);

    let path = dir.path().join("network.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let first = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let second = first + bytes[first..].iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[first..second]).unwrap();
    header["c_nn"] = serde_json::json!(header["c_nn"].as_f64().unwrap() * 50.0);
    let mut patched = bytes[..first].to_vec();
    patched.extend(serde_json::to_vec(&header).unwrap());
    patched.extend(&bytes[second..]);
    std::fs::write(&path, patched).unwrap();

    let out = run_toy(dir.path(), &["--stage", "verify"]);
    assert_eq!(code(&out), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.contains("sn_certificate") && l.contains("FAIL")), "{stdout}");

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert_eq!(code(&run_toy(dir.path(), &["--stage", "verify"])), 2);
}

#[test]
fn unattainable_lipschitz_demand_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    // The toy metric has norm ~9; without the offset that leaves no admissible C_nn.
    let body = std::fs::read_to_string(toy_config())
        .unwrap()
        .replace("l_m = 0.5", "l_m = 1e-6")
        .replace("[network]", "[network]\ncenter = false");
    let cfg = write_config(dir.path(), &body);
    let out_dir = dir.path().join("o");
    let run =
        |stage: &str| nscm(&["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--stage", stage]);
    assert_eq!(code(&run("sample")), 0);
    let out = run("train");
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("L_m"));
}
