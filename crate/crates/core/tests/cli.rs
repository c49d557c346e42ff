use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trunc_milstein::config::{sha256_hex, Manifest, RunConfig, MANIFEST_FILE};

const BIN: &str = env!("CARGO_BIN_EXE_tmilstein");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tmilstein(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn small_convergence(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        r#"
kind = "convergence"
seed = 99
samples = 200
t_end = 2.0
schemes = ["truncated-milstein", "euler-maruyama"]
reference_exponent = 10
coarse_exponents = [5, 6, 7]

[model]
name = "paper-example"
"#,
    )
    .unwrap();
    path
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn validate_policy_accepts_default_and_rejects_large_epsilon() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("validate.toml");
    let out = tmp.path().join("ok");
    let ok = tmilstein(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("admissible"));

    let out = tmp.path().join("bad");
    let bad = tmilstein(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "policy.epsilon=0.3",
    ]);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("[FAIL] delta^(1/4) h(delta) <= 1"), "{err}");
    assert!(!out.exists());
}

#[test]
fn convergence_rerun_is_byte_identical_and_manifest_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_convergence(tmp.path());
    let out = tmp.path().join("run");
    let args = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let first = tmilstein(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(listing(&out), ["errors.csv", MANIFEST_FILE, "slopes.csv"]);
    let snapshot: Vec<Vec<u8>> = listing(&out).iter().map(|f| fs::read(out.join(f)).unwrap()).collect();

    let mut again = args.to_vec();
    again.extend(["--workers", "3"]);
    assert!(tmilstein(&again).status.success());
    let rerun: Vec<Vec<u8>> = listing(&out).iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(snapshot, rerun);

    let manifest = Manifest::read(&out).unwrap();
    assert_eq!(manifest.seed, 99);
    for (name, sum) in &manifest.artifacts {
        assert_eq!(&sha256_hex(&fs::read(out.join(name)).unwrap()), sum);
    }
    let from_file = RunConfig::load(&cfg, &[format!("output_dir={:?}", out.to_str().unwrap())]).unwrap();
    assert_eq!(manifest.config, from_file);
    let text = fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    let table: toml::Table = toml::from_str(&text).unwrap();
    let config_text = toml::to_string(&table["config"]).unwrap();
    assert_eq!(RunConfig::from_toml_str(&config_text).unwrap(), manifest.config);

    let errors = fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().next().unwrap(), "scheme,delta,error,stderr,samples,excluded");
    assert_eq!(errors.lines().count(), 7);
}

#[test]
fn seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_convergence(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(tmilstein(&["--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(tmilstein(&["--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "100"])
        .status
        .success());
    assert_ne!(fs::read(a.join("errors.csv")).unwrap(), fs::read(b.join("errors.csv")).unwrap());
    assert_eq!(Manifest::read(&b).unwrap().seed, 100);
}

#[test]
fn single_path_one_step_has_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sp");
    let cfg = configs().join("single-path.toml");
    let res = tmilstein(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "t_end=1.0",
        "--set",
        "step_exponent=0",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn shipped_single_path_keeps_truncated_scheme_finite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sp");
    let cfg = configs().join("single-path.toml");
    assert!(tmilstein(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let csv = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "truncated-milstein").unwrap();
    let flag = header.iter().position(|h| *h == "truncated-milstein:blown_up").unwrap();
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[col].parse::<f64>().unwrap().is_finite());
        assert_eq!(cells[flag], "0");
        rows += 1;
    }
    assert_eq!(rows, 129);
}

#[test]
fn usage_errors_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_convergence(tmp.path());
    let out = tmp.path().join("x");
    for set in ["nonsense=1", "model.name=lorenz", "schemes=[\"rk4\"]", "coarse_exponents=[11]", "policy.family=tamed"] {
        let res = tmilstein(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", set]);
        assert_eq!(res.status.code(), Some(2), "{set}");
        let err = String::from_utf8_lossy(&res.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{set}: {err}");
        assert!(err.starts_with("error: "));
    }
    let missing = tmilstein(&["--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(!out.exists());
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.build_model().unwrap();
        cfg.build_policy().unwrap();
    }
}
