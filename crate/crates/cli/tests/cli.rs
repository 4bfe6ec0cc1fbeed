use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ganbound"));
    c.env_remove("GANBOUND_OUT").env("RUST_LOG", "error");
    c
}

fn small_config() -> Value {
    json!({
        "seed": 4,
        "domain": {"kind": "affine_target", "dim": 2, "m": 120, "n": 120},
        "map": {
            "g_spec": {"layer_widths": [2, 2], "activation": "identity", "output_activation": "identity"},
            "regime": "gan_only",
            "epochs": 10,
            "learning_rate": 0.01,
            "critic": {"train_epochs": 15}
        },
        "bound": {"lambda": 0.5, "t2": 3, "critic": {"train_epochs": 15}}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ganbound");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&read(dir.join("summary.json"))).unwrap()
}

#[test]
fn help_lists_every_subcommand_and_the_schema_location() {
    let out = run(bin().arg("--help"));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["stop", "select", "per-sample", "hyperband", "calibrate", "verify", "report"] {
        assert!(text.contains(sub), "{sub} missing from help:\n{text}");
    }
    assert!(text.contains("README.md"));
}

#[test]
fn missing_lambda_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["bound"].as_object_mut().unwrap().remove("lambda");
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = run(bin().arg("stop").arg(&path).arg("--out").arg(dir.path().join("o")));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains(".bound.lambda"));
    assert!(!dir.path().join("o").exists(), "no compute before validation");
}

#[test]
fn unknown_keys_and_mismatched_algorithm_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["bound"]["lamda"] = json!(1.0);
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = run(bin().arg("stop").arg(&path).arg("--out").arg(dir.path().join("o")));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let mut cfg = small_config();
    cfg["algorithm"] = json!("select");
    let path = write_config(dir.path(), "d.json", &cfg);
    let out = run(bin().arg("stop").arg(&path).arg("--out").arg(dir.path().join("o")));
    assert_eq!(code(&out), 1);
}

#[test]
fn stop_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &small_config());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out_dir in [&a, &b] {
        let out = run(bin().args(["--jobs", "2", "stop"]).arg(&path).arg("--out").arg(out_dir));
        assert!(matches!(code(&out), 0 | 2));
    }
    let traj = read(a.join("trajectory.csv"));
    assert_eq!(traj.lines().count(), 11, "header plus one row per epoch");
    for name in ["trajectory.csv", "losses.csv", "summary.json", "g1_selected.json", "trajectory.svg"] {
        assert_eq!(read(a.join(name)), read(b.join(name)), "{name} differs between identical runs");
    }
    let s = summary(&a);
    assert_eq!(s["command"], "stop");
    assert_eq!(s["seed"], 4);
    assert_eq!(s["config"]["bound"]["lambda"], 0.5);
    let svg = read(a.join("trajectory.svg"));
    assert_eq!(svg.matches("<polyline").count(), 2);

    run(bin().arg("stop").arg(&path).arg("--out").arg(&c).args(["--seed", "5"]));
    assert_eq!(summary(&c)["seed"], 5);
    assert_ne!(read(c.join("trajectory.csv")), traj);

    // The report subcommand rebuilds the same chart from the CSV alone.
    std::fs::remove_file(a.join("trajectory.svg")).unwrap();
    assert_eq!(code(&run(bin().arg("report").arg(&a))), 0);
    assert_eq!(read(a.join("trajectory.svg")), svg);
    let report: Value = serde_json::from_str(&read(a.join("report.json"))).unwrap();
    assert_eq!(report["trajectory"]["epochs"], 10);
}

#[test]
fn overrides_and_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["out_dir"] = json!("runs/x");
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = run(bin()
        .env("GANBOUND_OUT", dir.path().join("root"))
        .arg("stop")
        .arg(&path)
        .args(["--set", "map.epochs=3", "--set", "bound.lambda=0.25"]));
    assert!(matches!(code(&out), 0 | 2));
    let run_dir = dir.path().join("root/runs/x");
    assert_eq!(read(run_dir.join("trajectory.csv")).lines().count(), 4);
    assert_eq!(summary(&run_dir)["config"]["bound"]["lambda"], 0.25);
}

#[test]
fn select_reports_every_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["domain"]["kind"] = json!("mlp_target");
    cfg["map"]["g_spec"] = json!({"layer_widths": [2, 6, 2], "activation": "tanh", "output_activation": "identity"});
    cfg["bound"]["eps1"] = json!(1.0);
    cfg["select"] = json!({"depths": [0, 1, 2]});
    let path = write_config(dir.path(), "c.json", &cfg);
    let out_dir = dir.path().join("o");
    assert_eq!(code(&run(bin().arg("select").arg(&path).arg("--out").arg(&out_dir))), 0);
    let s = summary(&out_dir);
    let records = s["results"]["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    let depths: Vec<usize> = records
        .iter()
        .map(|r| r["spec"]["layer_widths"].as_array().unwrap().len() - 2)
        .collect();
    assert_eq!(depths, vec![0, 1, 2]);
    let chosen = s["results"]["chosen"].as_u64().unwrap() as usize;
    assert!(chosen < 3 && records[chosen]["admitted"] == json!(true));
}

#[test]
fn per_sample_writes_scatter_and_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["per_sample"] = json!({"count": 6});
    let path = write_config(dir.path(), "c.json", &cfg);
    let out_dir = dir.path().join("o");
    assert_eq!(code(&run(bin().arg("per-sample").arg(&path).arg("--out").arg(&out_dir))), 0);
    assert_eq!(read(out_dir.join("per_sample.csv")).lines().count(), 7);
    let r = summary(&out_dir)["results"]["correlation"]["r"].as_f64().unwrap();
    assert!(read(out_dir.join("per_sample.svg")).contains(&format!("r = {r:.4}")));
}

#[test]
fn hyperband_log_follows_the_bracket_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["domain"]["m"] = json!(60);
    cfg["domain"]["n"] = json!(60);
    cfg["map"]["critic"]["train_epochs"] = json!(5);
    cfg["bound"]["critic"]["train_epochs"] = json!(5);
    cfg["hyperband"] = json!({
        "space": {"depth": [0, 1], "width": [2, 4], "learning_rate": [0.001, 0.01], "batch_size": [32]},
        "r_max": 27,
        "eta": 3
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let out_dir = dir.path().join("o");
    assert!(matches!(code(&run(bin().arg("hyperband").arg(&path).arg("--out").arg(&out_dir))), 0 | 2));
    let log = read(out_dir.join("hyperband_log.csv"));
    let mut rows: Vec<(usize, usize, usize)> = Vec::new();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        rows.push((f[0].parse().unwrap(), f[1].parse().unwrap(), f[3].parse().unwrap()));
    }
    // (s, rung) -> (configurations, epochs) for R = 27, eta = 3.
    let table = [
        (3, vec![(27, 1), (9, 3), (3, 9), (1, 27)]),
        (2, vec![(12, 3), (4, 9), (1, 27)]),
        (1, vec![(6, 9), (2, 27)]),
        (0, vec![(4, 27)]),
    ];
    for (s, rungs) in table {
        for (i, (n, r)) in rungs.into_iter().enumerate() {
            let rung: Vec<_> = rows.iter().filter(|e| e.0 == s && e.1 == i).collect();
            assert_eq!(rung.len(), n, "bracket {s} rung {i}");
            assert!(rung.iter().all(|e| e.2 == r), "bracket {s} rung {i} budget");
        }
    }
    assert_eq!(rows.len(), 40 + 17 + 8 + 4);
}

#[test]
fn verify_passes_on_an_l1_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["domain"]["m"] = json!(300);
    cfg["domain"]["n"] = json!(300);
    cfg["bound"]["critic"]["train_epochs"] = json!(60);
    cfg["verify"] = json!({"pool_size": 10, "spread": 1.0});
    let path = write_config(dir.path(), "c.json", &cfg);
    let out_dir = dir.path().join("o");
    assert_eq!(code(&run(bin().arg("verify").arg(&path).arg("--out").arg(&out_dir))), 0);
    let report: Value = serde_json::from_str(&read(out_dir.join("lemma_report.json"))).unwrap();
    assert_eq!(report["violations"], 0);
    assert_eq!(report["checks"].as_array().unwrap().len(), 10);
}

#[test]
fn calibrate_failure_and_success() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["bound"]["eps1"] = json!(1.0);
    cfg["calibrate"] = json!({"grid": [0.1, 0.4, 1.6]});
    let path = write_config(dir.path(), "c.json", &cfg);
    let out_dir = dir.path().join("o");
    assert_eq!(code(&run(bin().arg("calibrate").arg(&path).arg("--out").arg(&out_dir))), 0);
    let cal: Value = serde_json::from_str(&read(out_dir.join("calibration.json"))).unwrap();
    assert_eq!(cal["entries"].as_array().unwrap().len(), 3);

    cfg["bound"]["eps1"] = json!(0.0);
    let path = write_config(dir.path(), "d.json", &cfg);
    assert_eq!(code(&run(bin().arg("calibrate").arg(&path).arg("--out").arg(dir.path().join("p")))), 1);
}
