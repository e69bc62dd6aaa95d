use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCENARIO: &str = r#"{
  "name": "tiny",
  "model": "single_integrator",
  "dt_s": 0.05,
  "robots": [
    {"start_m": [-1.0, 0.05], "goal_m": [1.0, 0.0], "radius_m": 0.075},
    {"start_m": [1.0, -0.05], "goal_m": [-1.0, 0.0], "radius_m": 0.075}
  ],
  "obstacles": [{"center_m": [0.0, 0.6], "radius_m": 0.2}],
  "noise": {"kind": "gaussian", "sigma": [1.0, 1.0]},
  "mpc": {"horizon": 3},
  "gamma": 1.0,
  "steps": 30,
  "seed": 4
}"#;

fn scenario_file(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn acpsbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acpsbc"))
        .args(args)
        .env_remove("ACPSBC_SEED")
        .output()
        .unwrap()
}

fn run_into(scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    acpsbc(&args)
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("out");
    let o = run_into(&sc, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "metrics.json", "metadata.json", "states.csv", "trajectory.svg", "min_distance.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 4);
    assert_eq!(metrics["method"], "acp_sbc");
}

#[test]
fn plots_off_skips_svg() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("out");
    let o = run_into(&sc, &out, &["--plots", "off", "--method", "cbf_baseline"]);
    assert!(o.status.success());
    assert!(out.join("trajectory.csv").is_file());
    assert!(!out.join("trajectory.svg").exists());
    let meta = std::fs::read_to_string(out.join("metadata.json")).unwrap();
    assert!(meta.contains("cbf_baseline"));
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_into(&sc, &a, &["--plots", "off"]).status.success());
    assert!(run_into(&sc, &b, &["--plots", "off"]).status.success());
    let ta = std::fs::read(a.join("trajectory.csv")).unwrap();
    let tb = std::fs::read(b.join("trajectory.csv")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn seed_flag_and_env_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("flag");
    assert!(run_into(&sc, &out, &["--plots", "off", "--seed", "9"]).status.success());
    let meta = std::fs::read_to_string(out.join("metadata.json")).unwrap();
    assert!(meta.contains("\"seed\": 9"), "{meta}");

    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_acpsbc"))
        .args(["run", "--scenario", sc.to_str().unwrap(), "--out", env_out.to_str().unwrap(), "--plots", "off"])
        .env("ACPSBC_SEED", "12")
        .output()
        .unwrap();
    assert!(o.status.success());
    let meta = std::fs::read_to_string(env_out.join("metadata.json")).unwrap();
    assert!(meta.contains("\"seed\": 12"), "{meta}");
}

#[test]
fn zero_horizon_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), &SCENARIO.replace(r#""horizon": 3"#, r#""horizon": 0"#));
    let o = run_into(&sc, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn missing_or_malformed_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(&dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let bad = scenario_file(dir.path(), "{ not json");
    let o = run_into(&bad, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("sweep");
    let o = acpsbc(&[
        "sweep", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--param", "gamma", "--values", "0.5,1,5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("sweep.csv")), 3);
    assert!(out.join("sweep.svg").is_file());
    assert!(out.join("gamma_0.5").join("trajectory.csv").is_file());
}

#[test]
fn sweep_rejects_fractional_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let o = acpsbc(&[
        "sweep", "--scenario", sc.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap(),
        "--param", "H", "--values", "2.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn compare_covers_both_methods_and_three_noises() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("cmp");
    let o = acpsbc(&["compare", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap(), "--plots", "off"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    for m in ["acp_sbc", "cbf_baseline"] {
        for n in ["gaussian", "uniform", "mixture"] {
            assert!(table.contains(&format!("{m},{n},")), "{table}");
        }
    }
}

#[test]
fn batch_summarizes_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let out = dir.path().join("batch");
    let o = acpsbc(&["batch", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("batch.csv")), 3);
    for s in 1..=3 {
        assert!(out.join(format!("seed_{s}")).join("metrics.json").is_file());
    }
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["runs"], 3);
}

#[test]
fn zero_seeds_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let o = acpsbc(&["batch", "--scenario", sc.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap(), "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), SCENARIO);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run_into(&sc, &blocker.join("out"), &["--plots", "off"]);
    assert_eq!(o.status.code(), Some(1));
}
