//! Artifacts: `results.csv`, `summary.txt` and one `plot_<metric>.dat` per
//! metric.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::experiment::Outcome;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Metric names in first-appearance order.
fn metrics(outcome: &Outcome) -> Vec<&str> {
    let mut seen: Vec<&str> = Vec::new();
    for r in &outcome.report.rows {
        if !seen.contains(&r.metric.as_str()) {
            seen.push(&r.metric);
        }
    }
    seen
}

pub fn plot_data(outcome: &Outcome, metric: &str) -> String {
    let mut s = String::from("# param estimate\n");
    for r in outcome.report.rows.iter().filter(|r| r.metric == metric) {
        let _ = writeln!(s, "{:e} {:e}", r.param, r.estimate);
    }
    s
}

pub fn summary(cfg: &RunConfig, scenario_tag: &str, outcome: &Outcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {scenario_tag}");
    let _ = writeln!(s, "kind: {}", cfg.kind);
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "{}: {:?}", cfg.grid.param_name(), cfg.grid.values());
    let _ = writeln!(s, "replicas: {}", cfg.replicas);
    for (metric, f) in &outcome.fits {
        let _ = writeln!(
            s,
            "slope({metric}) = {:.4} +- {:.4} over {} points",
            f.slope, f.stderr, f.points
        );
    }
    for c in &outcome.checks {
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{verdict} {} = {:.6e} ({})", c.name, c.value, c.target);
    }
    for n in &outcome.notes {
        let _ = writeln!(s, "note: {n}");
    }
    let overall = if outcome.checks.is_empty() {
        "NO CHECKS"
    } else if outcome.passed() {
        "PASS"
    } else {
        "FAIL"
    };
    let _ = writeln!(s, "overall: {overall}");
    s
}

/// Metric names are used in file names; keep them portable.
fn file_safe(metric: &str) -> String {
    metric
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' })
        .collect()
}

/// Write all artifacts into `dir`; returns the paths written.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, scenario_tag: &str, outcome: &Outcome) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut csv = Vec::new();
    outcome.report.write_csv(&mut csv)?;
    let p = dir.join(RESULTS_FILE);
    fs::write(&p, csv)?;
    written.push(p);
    let p = dir.join(SUMMARY_FILE);
    fs::write(&p, summary(cfg, scenario_tag, outcome))?;
    written.push(p);
    for m in metrics(outcome) {
        let p = dir.join(format!("plot_{}.dat", file_safe(m)));
        fs::write(&p, plot_data(outcome, m))?;
        written.push(p);
    }
    Ok(written)
}
