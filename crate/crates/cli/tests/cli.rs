use std::process::Command;

fn cpflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cpflow"))
}

#[test]
fn unknown_scenario_exits_2_and_lists_registry() {
    let out = cpflow().args(["run", "--scenario", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lipschitz_1d") && err.contains("mckean_sin"), "{err}");
}

#[test]
fn rates_rejects_short_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpflow()
        .args(["rates", "--scenario", "lipschitz_1d", "--eps", "0.1,0.05", "--replicas", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oscillatory_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpflow()
        .args([
            "run", "--scenario", "oscillatory", "--kind", "strong", "--eps", "1e-4", "--replicas", "400", "--seed", "7",
            "--workers", "2", "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scenario,param_name,param,metric,estimate,ci,replicas"));
    let row = csv.lines().find(|l| l.contains(",isometry_ratio,")).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert!(cols[0].starts_with("oscillatory@") && cols[0].ends_with(":seed=7"));
    let est: f64 = cols[4].parse().unwrap();
    assert!((est - 1.0).abs() < 0.25, "{est}");
    let plot = std::fs::read_to_string(dir.path().join("plot_isometry_ratio.dat")).unwrap();
    let data: Vec<&str> = plot.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 1);
    assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("seed: 7"));
}

#[test]
fn toml_config_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "scenario = \"brownian\"\nkind = \"donsker\"\neps = [0.01]\nreplicas = 50\nseed = 3\n",
    )
    .unwrap();
    let out = cpflow()
        .args(["run", "--replicas", "300", "--workers", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("o/results.csv")).unwrap();
    let ks = csv.lines().find(|l| l.contains(",ks,")).unwrap();
    assert!(ks.ends_with(",300") && ks.contains(":seed=3"), "{ks}");
}

#[test]
fn check_flag_turns_failed_checks_into_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // At eps = 0.1 the lattice walk is too coarse for the KS bound.
    let out = cpflow()
        .args([
            "run", "--scenario", "brownian", "--kind", "donsker", "--eps", "0.1", "--replicas", "100", "--check",
            "--out",
        ])
        .arg(dir.path())
        .env("CPFLOW_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(cpflow::EXIT_CHECK_FAILED));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |w: &str| {
        let o = dir.path().join(format!("w{w}"));
        let st = cpflow()
            .args(["rates", "--scenario", "filippov_sign", "--eps", "0.02,0.01,0.005", "--replicas", "64", "--workers", w, "--out"])
            .arg(&o)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read(o.join("results.csv")).unwrap()
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn list_names_every_scenario() {
    let out = cpflow().arg("list").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for n in cpflow_core::scenarios::registered_names() {
        assert!(text.contains(n));
    }
}
