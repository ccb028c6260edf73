#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ppfm_core::covariance::{self, ThresholdRule};
use ppfm_core::panel::{self, CsvLayout, ReturnPanel};
use ppfm_core::portfolio;
use ppfm_core::ppfm;

pub const BIN: &str = env!("CARGO_BIN_EXE_ppfm");

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Copy the committed fixture into `dir/fx`.
pub fn stage_fixture(dir: &Path) {
    let fx = dir.join("fx");
    std::fs::create_dir_all(&fx).unwrap();
    for f in ["returns.csv", "sectors.csv", "rf.csv"] {
        std::fs::copy(fixtures().join(f), fx.join(f)).unwrap();
    }
}

pub fn ppfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("ppfm runs")
}

pub fn ppfm_ok(dir: &Path, args: &[&str]) -> Output {
    let out = ppfm(dir, args);
    assert!(
        out.status.success(),
        "ppfm {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub const INPUT: [&str; 6] = ["--returns", "fx/returns.csv", "--sectors", "fx/sectors.csv", "--rf", "fx/rf.csv"];

pub fn with_input<'a>(sub: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![sub];
    v.extend(INPUT);
    v.extend(rest);
    v
}

/// One small invocation of every workflow.
pub fn workflows() -> Vec<Vec<&'static str>> {
    vec![
        vec!["fixture", "--out", "gen"],
        with_input("estimate", &["--lambda", "cv", "--k", "2", "--out", "est"]),
        with_input("tune", &["--k", "2", "--ctau-repeats", "4", "--out", "tune"]),
        vec!["simulate", "--scenario", "0,3", "--reps", "3", "--num-sectors", "4", "--assets", "10", "--seed", "5", "--out", "sim/table.csv", "--json", "sim/study.json"],
        with_input("backtest", &["--strategy", "individual,joint,pooled", "--target", "28", "--ctau-repeats", "5", "--seed", "3", "--out", "bt/report.json"]),
    ]
}

/// Run every workflow in a fresh directory with the given thread count.
pub fn run_all(threads: usize) -> (tempfile::TempDir, BTreeMap<PathBuf, Vec<u8>>) {
    let dir = tempfile::tempdir().unwrap();
    stage_fixture(dir.path());
    let t = threads.to_string();
    for w in workflows() {
        let mut args = vec!["--threads", t.as_str()];
        args.extend(w);
        ppfm_ok(dir.path(), &args);
    }
    let snap = snapshot(dir.path());
    (dir, snap)
}

pub fn load_fixture_sectors() -> Vec<ReturnPanel> {
    let returns = panel::load_panel(&fixtures().join("returns.csv"), CsvLayout::Wide).unwrap();
    let rf = panel::load_risk_free(&fixtures().join("rf.csv")).unwrap();
    let map = panel::load_sector_map(&fixtures().join("sectors.csv")).unwrap();
    let excess = panel::to_excess(&returns, &rf).unwrap();
    panel::group_by_sector(&excess, &map, 3).panels
}

/// Per-window PCA, thresholded covariance and minimum-variance weights,
/// held for `period` days; missing held returns count as zero.
pub fn plain_mvp_backtest(panel: &ReturnPanel, window: usize, period: usize, k: usize, c: f64) -> Vec<f64> {
    let n = panel.num_periods();
    let mut out = Vec::new();
    let mut node = window;
    while node < n {
        let w = panel::complete_case_window(panel, node - window, window).unwrap();
        let fit = ppfm::pca_single(w.values(), k).unwrap();
        let (sigma, _) = covariance::factor_return_cov(&fit, c, ThresholdRule::Soft).unwrap();
        let weights = portfolio::mvp_weights(&sigma).unwrap();
        let rows: Vec<usize> = w
            .assets()
            .iter()
            .map(|a| panel.assets().iter().position(|x| x == a).unwrap())
            .collect();
        for t in node..(node + period).min(n) {
            let r: f64 = rows
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let x = panel.values()[(i, t)];
                    if x.is_nan() {
                        0.0
                    } else {
                        weights[j] * x
                    }
                })
                .sum();
            out.push(r);
        }
        node += period;
    }
    out
}

/// `risk, cr, cr_simple, sr` of a daily series, computed directly.
pub fn naive_performance(r: &[f64]) -> [f64; 4] {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let cr = r.iter().fold(1.0, |a, x| a * (1.0 + x)) - 1.0;
    [sd, cr, r.iter().sum(), mean / sd]
}

/// Parse `strategy,sector,risk,cr,cr_simple,sr` rows.
pub fn parse_report_csv(text: &str) -> Vec<(String, String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2..].iter().map(|x| x.parse().unwrap()).collect())
        })
        .collect()
}
