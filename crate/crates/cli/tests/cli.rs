mod common;

use common::*;
use ppfm_core::FactorFit;

#[test]
fn outputs_identical_across_runs_and_thread_counts() {
    let (_a, one) = run_all(1);
    let (_b, again) = run_all(1);
    let (_c, four) = run_all(4);
    assert!(one.len() > 20);
    for (path, bytes) in &one {
        assert_eq!(Some(bytes), again.get(path), "{} differs between runs", path.display());
        assert_eq!(Some(bytes), four.get(path), "{} differs between 1 and 4 threads", path.display());
    }
    assert_eq!(one.len(), four.len());
}

#[test]
fn committed_fixture_is_regenerated_exactly() {
    let dir = tempfile::tempdir().unwrap();
    ppfm_ok(dir.path(), &["fixture", "--out", "gen"]);
    for f in ["returns.csv", "sectors.csv", "rf.csv"] {
        let fresh = std::fs::read(dir.path().join("gen").join(f)).unwrap();
        let committed = std::fs::read(fixtures().join(f)).unwrap();
        assert!(fresh == committed, "{f} drifted from the generator");
    }
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    stage_fixture(dir.path());
    ppfm_ok(dir.path(), &with_input("backtest", &["--strategy", "individual", "--k", "2", "--out", "bt/report.json"]));
    let before = snapshot(&dir.path().join("bt"));
    let out = ppfm_ok(dir.path(), &["--replay", "bt/report.manifest.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("reproduced"));
    assert_eq!(before, snapshot(&dir.path().join("bt")));

    // a recorded hash that no longer matches is reported
    let path = dir.path().join("bt/report.manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["outputs"][0]["sha256"] = serde_json::json!("00");
    std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let out = ppfm(dir.path(), &["--replay", "bt/report.manifest.json"]);
    assert_eq!(out.status.code(), Some(6));

    // so is a changed input
    ppfm_ok(dir.path(), &["--replay", "bt/report.manifest.json"]);
    std::fs::write(dir.path().join("fx/rf.csv"), "date,rate\n").unwrap();
    let out = ppfm(dir.path(), &["--replay", "bt/report.manifest.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn manifest_records_the_resolved_run() {
    let dir = tempfile::tempdir().unwrap();
    ppfm_ok(dir.path(), &["simulate", "--scenario", "0", "--reps", "2", "--num-sectors", "4", "--assets", "10", "--seed", "9", "--out", "t.csv"]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("t.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["command"]["subcommand"], "simulate");
    assert_eq!(m["command"]["c_tau"], 0.5);
    assert_eq!(m["command"]["lambda"], "cv");
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap()).collect();
    assert_eq!(outputs, vec!["t.csv", "t.figure.csv"]);
}

#[test]
fn lambda_zero_estimate_equals_per_sector_runs() {
    let dir = tempfile::tempdir().unwrap();
    stage_fixture(dir.path());
    ppfm_ok(dir.path(), &with_input("estimate", &["--lambda", "0", "--k", "2", "--out", "all"]));
    let read_fits = |p: &str| -> Vec<FactorFit> {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(p)).unwrap()).unwrap();
        serde_json::from_value(v["fits"].clone()).unwrap()
    };
    let joint = read_fits("all/fit.json");
    assert_eq!(joint.len(), 3);
    let map = std::fs::read_to_string(fixtures().join("sectors.csv")).unwrap();
    for (m, code) in ["28", "35", "36"].iter().enumerate() {
        let only: String = map
            .lines()
            .enumerate()
            .filter(|(i, l)| *i == 0 || l.ends_with(&format!(",{code}")))
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        std::fs::write(dir.path().join(format!("fx/only_{code}.csv")), only).unwrap();
        let sectors = format!("fx/only_{code}.csv");
        let out = format!("one_{code}");
        ppfm_ok(
            dir.path(),
            &["estimate", "--returns", "fx/returns.csv", "--sectors", &sectors, "--rf", "fx/rf.csv", "--lambda", "0", "--k", "2", "--out", &out],
        );
        let single = read_fits(&format!("{out}/fit.json"));
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], joint[m], "sector {code}");
        let w_all = std::fs::read(dir.path().join(format!("all/weights_{code}.csv"))).unwrap();
        let w_one = std::fs::read(dir.path().join(format!("{out}/weights_{code}.csv"))).unwrap();
        assert_eq!(w_all, w_one);
    }
}

const GOLDEN_ARGS: [&str; 9] = ["--strategy", "individual", "--k", "2", "--ctau-mode", "fixed", "--c-tau", "0.5", "--out"];

/// The golden report, rebuilt from the direct per-window pipeline.
fn oracle_report() -> String {
    let panels = load_fixture_sectors();
    let series: Vec<Vec<f64>> = panels.iter().map(|p| plain_mvp_backtest(p, 100, 21, 2, 0.5)).collect();
    let n = series[0].len();
    let avg: Vec<f64> = (0..n).map(|t| series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64).collect();
    let mut out = String::from("strategy,sector,risk,cr,cr_simple,sr\n");
    let labels: Vec<String> = panels.iter().map(|p| p.sector_label().unwrap().to_string()).collect();
    for (label, s) in labels.iter().map(String::as_str).chain(["ALL"]).zip(series.iter().chain([&avg])) {
        let v = naive_performance(s);
        out.push_str(&format!("individual,{label},{:.10e},{:.10e},{:.10e},{:.10e}\n", v[0], v[1], v[2], v[3]));
    }
    out
}

fn golden_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/backtest_individual.csv")
}

fn assert_reports_close(a: &str, b: &str) {
    let (a, b) = (parse_report_csv(a), parse_report_csv(b));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((&x.0, &x.1), (&y.0, &y.1));
        for (u, v) in x.2.iter().zip(&y.2) {
            assert!((u - v).abs() <= 1e-10 * v.abs().max(1e-3), "{} {}: {u} vs {v}", x.0, x.1);
        }
    }
}

#[test]
fn golden_file_matches_oracle() {
    let oracle = oracle_report();
    if std::env::var_os("PPFM_UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), &oracle).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_reports_close(&oracle, &golden);
}

#[test]
fn backtest_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    stage_fixture(dir.path());
    let mut rest = GOLDEN_ARGS.to_vec();
    rest.push("bt/report.json");
    ppfm_ok(dir.path(), &with_input("backtest", &rest));
    let got = std::fs::read_to_string(dir.path().join("bt/report.csv")).unwrap();
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_reports_close(&got, &golden);
}

#[test]
fn errors_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    stage_fixture(dir.path());
    let missing = ppfm(dir.path(), &["estimate", "--returns", "nope.csv", "--sectors", "fx/sectors.csv", "--out", "e"]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error [io]"));
    let bad = ppfm(dir.path(), &with_input("backtest", &["--lambda-mode", "fixed", "--out", "b.json"]));
    assert_eq!(bad.status.code(), Some(3));
    let unknown = ppfm(dir.path(), &["tune", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    let scenario = ppfm(dir.path(), &["simulate", "--scenario", "9", "--reps", "1", "--num-sectors", "4", "--assets", "10", "--out", "t.csv"]);
    assert_eq!(scenario.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&scenario.stderr).contains("simulation:"));
}

#[test]
fn version_names_the_interface() {
    let dir = tempfile::tempdir().unwrap();
    let out = ppfm_ok(dir.path(), &["--version"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("ppfm 0.1.0") && text.contains("interface 1"));
}
