//! Error metrics, rate fits and distributional checks.
//!
//! Reductions run in index order so results depend only on the inputs.

use std::io::{self, Write};

use crate::randomness::RngStream;
use crate::reference::ReferencePath;
use crate::scheme::{drive, CoefficientSet, SchemeError, SchemePath};

/// Two-sided 95 % normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("rate fit needs at least 3 positive points, got {0}")]
    TooFewPoints(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("path diverged at ε = {eps}; the scenario is not dissipative at this step")]
    NonDissipative { eps: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// Point estimate with a 95 % CI half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub ci: f64,
    pub replicas: usize,
}

/// Sample mean and CI half-width `1.96 s / √n`.
pub fn mean_ci(samples: &[f64]) -> Estimate {
    let n = samples.len();
    if n == 0 {
        return Estimate {
            value: f64::NAN,
            ci: f64::NAN,
            replicas: 0,
        };
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let ci = if n > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z95 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Estimate {
        value: mean,
        ci,
        replicas: n,
    }
}

/// Sample variance with a CI from the fourth central moment.
pub fn variance_ci(samples: &[f64]) -> Estimate {
    let n = samples.len();
    if n < 2 {
        return Estimate {
            value: f64::NAN,
            ci: f64::NAN,
            replicas: n,
        };
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let var = m2 * nf / (nf - 1.0);
    let ci = Z95 * ((m4 - m2 * m2).max(0.0) / nf).sqrt();
    Estimate {
        value: var,
        ci,
        replicas: n,
    }
}

/// One CSV row of an error report.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub scenario: String,
    pub param_name: String,
    pub param: f64,
    pub metric: String,
    pub estimate: f64,
    pub ci: f64,
    pub replicas: usize,
}

/// Result of a log-log least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
    pub fit: Option<RateFit>,
}

pub const CSV_HEADER: &str = "scenario,param_name,param,metric,estimate,ci,replicas";

impl ErrorReport {
    pub fn push(&mut self, row: ErrorRow) {
        self.rows.push(row);
    }

    /// Rows for `metric` as `(param, estimate)`.
    pub fn series(&self, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.param, r.estimate))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:e},{},{:e},{:e},{}",
                r.scenario, r.param_name, r.param, r.metric, r.estimate, r.ci, r.replicas
            )?;
        }
        Ok(())
    }
}

/// `sup_t |X^ε_t − X_t|²` for one path, checked at every jump time (both
/// sides) and at every reference node.
pub fn path_sup_sq_error(path: &SchemePath, reference: &ReferencePath) -> f64 {
    let d = path.dim();
    let mut r = vec![0.0; d];
    let mut worst = 0.0f64;
    let mut gap = |x: &[f64], r: &[f64]| {
        let e: f64 = x.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum();
        worst = worst.max(e);
    };
    let times = path.times();
    for n in 0..times.len() {
        reference.evaluate_into(times[n], &mut r);
        gap(path.state(n), &r);
        if n > 0 {
            gap(path.state(n - 1), &r);
        }
    }
    let horizon = path.horizon();
    reference.evaluate_into(horizon, &mut r);
    gap(path.terminal(), &r);
    for &t in reference.times() {
        if t <= horizon {
            let n = times.partition_point(|&s| s <= t) - 1;
            reference.evaluate_into(t, &mut r);
            gap(path.state(n), &r);
        }
    }
    worst
}

/// Replica mean of `sup_t |X^ε_t − X_t|²`.
pub fn strong_error(paths: &[SchemePath], reference: &ReferencePath) -> Estimate {
    let sups: Vec<f64> = paths
        .iter()
        .map(|p| path_sup_sq_error(p, reference))
        .collect();
    mean_ci(&sups)
}

/// `|mean φ(X^ε_T) − exact|` from the values `φ(X^ε_T)`.
pub fn weak_error(phi_values: &[f64], exact: f64) -> Estimate {
    let m = mean_ci(phi_values);
    Estimate {
        value: (m.value - exact).abs(),
        ..m
    }
}

/// OLS slope of `log y` on `log x`. Nonpositive estimates are dropped.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit, StatsError> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(x, y)| {
            let ok = x > 0.0 && y > 0.0 && y.is_finite();
            if !ok {
                log::warn!("dropping nonpositive point ({x}, {y}) from rate fit");
            }
            ok
        })
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = kept.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(StatsError::InvalidParameter(
            "rate fit needs distinct parameters".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = kept
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let stderr = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(RateFit {
        slope,
        stderr,
        intercept,
        points: n,
    })
}

/// Kolmogorov-Smirnov distance between the samples and `cdf`.
pub fn ks_statistic<F>(samples: &[f64], cdf: F) -> Result<f64, StatsError>
where
    F: Fn(f64) -> f64,
{
    if samples.len() < 100 {
        return Err(StatsError::TooFewSamples {
            needed: 100,
            got: samples.len(),
        });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// Exact W1 distance between two empirical laws on the line:
/// `∫_0^1 |F_a^{-1}(u) − F_b^{-1}(u)| du`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "samples must be nonempty");
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    if xa.len() == xb.len() {
        return xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / xa.len() as f64;
    }
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < xa.len() && j < xb.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (xa[i] - xb[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// `(horizon − burn_in)^{-1} ∫_{burn_in}^{horizon} g(X^ε_s) ds` along one path,
/// integrated exactly on the piecewise-constant trajectory.
pub fn invariant_estimate<G>(
    coeffs: &CoefficientSet,
    x0: &[f64],
    eps: f64,
    burn_in: f64,
    horizon: f64,
    g: G,
    stream: &RngStream,
) -> Result<f64, StatsError>
where
    G: Fn(&[f64]) -> f64,
{
    if !(0.0..horizon).contains(&burn_in) {
        return Err(StatsError::InvalidParameter(format!(
            "burn-in {burn_in} must lie in [0, {horizon})"
        )));
    }
    let mut last_t = 0.0;
    let mut last_g = g(x0);
    let mut acc = 0.0;
    let overlap = |a: f64, b: f64| (b.min(horizon) - a.max(burn_in)).max(0.0);
    let end = drive(coeffs, x0, eps, horizon, stream, |_, t, x| {
        acc += last_g * overlap(last_t, t);
        last_t = t;
        last_g = g(x);
    });
    match end {
        Ok(_) => {}
        Err(SchemeError::Divergence { .. }) => return Err(StatsError::NonDissipative { eps }),
        Err(e) => return Err(e.into()),
    }
    acc += last_g * overlap(last_t, horizon);
    Ok(acc / (horizon - burn_in))
}

/// Limit variance `∫_0^T e^{2∫_s^T ∂_x b(r, X_r) dr} b(s, X_s)² ds` of the
/// path-scale fluctuation, by the trapezoid rule on `n` steps along a 1-D
/// reference path.
pub fn clt_limit_variance<B, D>(reference: &ReferencePath, b: B, db: D, horizon: f64, n: usize) -> f64
where
    B: Fn(f64, f64) -> f64,
    D: Fn(f64, f64) -> f64,
{
    assert_eq!(reference.dim(), 1, "limit variance is implemented in 1-D");
    let h = horizon / n as f64;
    let mut x = [0.0];
    let mut grad = Vec::with_capacity(n + 1);
    let mut drift_sq = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * h;
        reference.evaluate_into(t, &mut x);
        grad.push(db(t, x[0]));
        drift_sq.push(b(t, x[0]).powi(2));
    }
    // G(s_k) = ∫_{s_k}^T ∂b, accumulated backwards.
    let mut g = vec![0.0; n + 1];
    for k in (0..n).rev() {
        g[k] = g[k + 1] + 0.5 * h * (grad[k] + grad[k + 1]);
    }
    let f: Vec<f64> = (0..=n).map(|k| (2.0 * g[k]).exp() * drift_sq[k]).collect();
    h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n]))
}

/// Variance of `Z^ε_T = (X^ε_T − X_T)/√ε` divided by the limit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CltCheck {
    pub variance: Estimate,
    pub limit: f64,
    pub ratio: f64,
    pub ratio_ci: f64,
}

pub fn clt_check(terminal: &[f64], reference_terminal: f64, eps: f64, limit: f64) -> CltCheck {
    let z: Vec<f64> = terminal
        .iter()
        .map(|x| (x - reference_terminal) / eps.sqrt())
        .collect();
    let variance = variance_ci(&z);
    let (ratio, ratio_ci) = if limit > 0.0 {
        (variance.value / limit, variance.ci / limit)
    } else {
        (f64::NAN, f64::NAN)
    };
    CltCheck {
        variance,
        limit,
        ratio,
        ratio_ci,
    }
}
