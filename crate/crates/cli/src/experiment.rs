//! One runner per experiment kind. Replica work fans out over the current
//! rayon pool; results are collected in index order, so outputs depend only
//! on the configuration and seed.

use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use cpflow_core::mckean::{
    chaos_error, fluctuation_variance, limit_bracket_energy, simulate_coupled, simulate_replica, InitialLaw,
    KernelSet, LimitFlow, ParticleOptions, PicardOptions,
};
use cpflow_core::nse2d::{biot_savart, solve_nse_poisson, spectral_reference, NseConfig};
use cpflow_core::randomness::{derive_stream, Clock, Label, RngStream};
use cpflow_core::reference::{filippov_solve, rk4_solve, ClosedForm, ReferencePath, DEFAULT_DELTA_GRID};
use cpflow_core::scenarios::{
    stable_tail_prediction, ExperimentKind, Grid, LatticeTail, Model, NseScenario, ScenarioSpec, Target,
};
use cpflow_core::scheme::{simulate_path, CoefficientSet};
use cpflow_core::stats::{
    clt_check, clt_limit_variance, fit_rate, invariant_estimate, ks_statistic, mean_ci, path_sup_sq_error,
    weak_error, ErrorReport, ErrorRow, Estimate, RateFit, Z95,
};

use crate::config::RunConfig;

/// Nodes of closed-form reference paths.
const CLOSED_FORM_NODES: usize = 4000;
/// Gap `k` in the clock tail event `N^ε_t ≥ (e − 1) t / ε + k`.
const CLOCK_TAIL_GAP: f64 = 5.0;
/// Spectral reference versus closed form.
const SPECTRAL_TOLERANCE: f64 = 1e-8;
/// Points of the limit-variance quadrature.
const LIMIT_QUADRATURE: usize = 2000;
/// Cloud size for the limit bracket energy.
const ENERGY_CLOUD: usize = 4096;

/// A pass/fail verdict against an acceptance threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: String,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, target: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            value,
            target: target.into(),
            pass,
        }
    }

    fn against(name: impl Into<String>, value: f64, target: Target) -> Self {
        Self::new(name, value, target.to_string(), target.contains(value))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub report: ErrorReport,
    pub fits: Vec<(String, RateFit)>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

struct Rows<'a> {
    tag: String,
    param_name: &'static str,
    out: &'a mut Outcome,
}

impl Rows<'_> {
    fn push(&mut self, param: f64, metric: &str, e: Estimate) {
        self.out.report.push(ErrorRow {
            scenario: self.tag.clone(),
            param_name: self.param_name.to_string(),
            param,
            metric: metric.to_string(),
            estimate: e.value,
            ci: e.ci,
            replicas: e.replicas,
        });
    }

    fn value(&mut self, param: f64, metric: &str, v: f64, replicas: usize) {
        self.push(
            param,
            metric,
            Estimate {
                value: v,
                ci: 0.0,
                replicas,
            },
        );
    }
}

fn root(seed: u64, labels: &[Label]) -> Result<RngStream> {
    derive_stream(seed, labels).map_err(|e| anyhow!("stream derivation: {e}"))
}

fn replica_stream(seed: u64, point: usize, r: usize) -> Result<RngStream> {
    root(seed, &[Label::new("grid", point as u64), Label::replica(r as u64)])
}

/// `f(r)` for `r in 0..m`, in parallel, gathered in index order.
fn replicas<T, F>(m: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..m).into_par_iter().map(f).collect()
}

fn eps_grid(cfg: &RunConfig) -> Result<&[f64]> {
    match &cfg.grid {
        Grid::Eps(v) => Ok(v),
        Grid::N(_) => bail!("kind '{}' takes an eps grid", cfg.kind),
    }
}

fn n_grid(cfg: &RunConfig) -> Result<&[usize]> {
    match &cfg.grid {
        Grid::N(v) => Ok(v),
        Grid::Eps(_) => bail!("kind '{}' takes an N grid", cfg.kind),
    }
}

fn sde(spec: &ScenarioSpec) -> Result<&CoefficientSet> {
    spec.coefficients()
        .ok_or_else(|| anyhow!("scenario '{}' is not a single-path model", spec.name))
}

fn particles(spec: &ScenarioSpec) -> Result<(&KernelSet, &InitialLaw)> {
    match &spec.model {
        Model::Particles { kernel, law } => Ok((kernel, law)),
        _ => bail!("scenario '{}' is not a particle model", spec.name),
    }
}

fn sqrt_estimate(e: Estimate) -> Estimate {
    let v = e.value.max(0.0).sqrt();
    Estimate {
        value: v,
        ci: if v > 0.0 { e.ci / (2.0 * v) } else { f64::NAN },
        replicas: e.replicas,
    }
}

fn scaled(e: Estimate, k: f64) -> Estimate {
    Estimate {
        value: e.value * k,
        ci: e.ci * k,
        replicas: e.replicas,
    }
}

/// Drift-only reference: closed form, mollified Filippov solve, or RK4.
fn reference_path(spec: &ScenarioSpec) -> Result<ReferencePath> {
    let coeffs = sde(spec)?.drift_only();
    if let Some(exact) = &spec.exact {
        let exact = exact.clone();
        let x0 = spec.x0.clone();
        let x: ClosedForm = Arc::new(move |t, out| exact(t, &x0, out));
        return Ok(ReferencePath::closed_form(spec.x0.len(), spec.horizon, CLOSED_FORM_NODES, x));
    }
    if let Some(m) = &spec.mollified {
        return Ok(filippov_solve(m, &spec.x0, spec.horizon, spec.reference_step, &DEFAULT_DELTA_GRID, None)?);
    }
    Ok(rk4_solve(
        |t, x, out| coeffs.drift(t, x, out),
        &spec.x0,
        spec.horizon,
        spec.reference_step,
    )?)
}

fn fit(outcome: &mut Outcome, metric: &str, required: bool) -> Result<Option<RateFit>> {
    let pts: Vec<(f64, f64)> = outcome
        .report
        .series(metric)
        .into_iter()
        .filter(|(_, y)| *y > 0.0 && y.is_finite())
        .collect();
    match fit_rate(&pts) {
        Ok(f) => {
            outcome.fits.push((metric.to_string(), f));
            outcome.report.fit = Some(f);
            Ok(Some(f))
        }
        Err(e) if required => Err(anyhow!("rate fit of {metric}: {e}")),
        Err(_) => {
            outcome.notes.push(format!("no slope for {metric}: fewer than 3 usable points"));
            Ok(None)
        }
    }
}

fn slope_check(outcome: &mut Outcome, metric: &str, target: Option<Target>, required: bool) -> Result<()> {
    if let Some(f) = fit(outcome, metric, required)? {
        if let Some(t @ Target::Slope { .. }) = target {
            outcome.checks.push(Check::against(format!("slope({metric})"), f.slope, t));
        }
    }
    Ok(())
}

fn target_of(spec: &ScenarioSpec, kind: ExperimentKind) -> Option<Target> {
    spec.experiment(kind)
        .or_else(|| match kind {
            ExperimentKind::Rates => spec.experiment(ExperimentKind::Strong),
            ExperimentKind::Strong => spec.experiment(ExperimentKind::Rates),
            _ => None,
        })
        .and_then(|e| e.target)
}

/// Run the configured experiment on the current rayon pool. `sweep` demands
/// a rate fit (the `rates` command).
pub fn run_experiment(cfg: &RunConfig, spec: &ScenarioSpec, sweep: bool) -> Result<Outcome> {
    if sweep && cfg.grid.len() < 3 {
        bail!("a rate sweep needs at least 3 grid points, got {}", cfg.grid.len());
    }
    let mut outcome = Outcome::default();
    let target = target_of(spec, cfg.kind);
    let tag = format!("{}:seed={}", spec.hash_tag(), cfg.seed);
    let mut rows = Rows {
        tag,
        param_name: cfg.grid.param_name(),
        out: &mut outcome,
    };
    match cfg.kind {
        ExperimentKind::Strong | ExperimentKind::Rates => strong(cfg, spec, &mut rows)?,
        ExperimentKind::Weak => weak(cfg, spec, &mut rows)?,
        ExperimentKind::Invariant => invariant(cfg, spec, &mut rows, target)?,
        ExperimentKind::Clt => clt(cfg, spec, &mut rows, target)?,
        ExperimentKind::Donsker => donsker(cfg, spec, &mut rows, target)?,
        ExperimentKind::Chaos => chaos(cfg, spec, &mut rows)?,
        ExperimentKind::Fluctuation => fluctuation(cfg, spec, &mut rows, target)?,
        ExperimentKind::Nse => nse(cfg, spec, &mut rows, target)?,
        ExperimentKind::Stable => stable(cfg, spec, &mut rows)?,
        ExperimentKind::Tail => clock_tail(cfg, &mut rows)?,
    }
    let headline = match cfg.kind {
        ExperimentKind::Strong | ExperimentKind::Rates => Some("sup_rms"),
        ExperimentKind::Weak => Some("weak_error"),
        ExperimentKind::Chaos => Some("chaos_sup_sq"),
        ExperimentKind::Nse => Some("u_sup_error"),
        _ => None,
    };
    match headline {
        Some(m) => slope_check(&mut outcome, m, target, sweep)?,
        None if sweep => bail!("kind '{}' has no rate to fit", cfg.kind),
        None => {}
    }
    if let (Some(Target::Interval { lo, hi }), ExperimentKind::Strong | ExperimentKind::Rates) = (target, cfg.kind) {
        let t = Target::Interval { lo, hi };
        for (p, v) in outcome.report.series("isometry_ratio") {
            outcome.checks.push(Check::against(format!("isometry_ratio@{p:e}"), v, t));
        }
    }
    Ok(outcome)
}

/// Sup-in-time error of the drift-only scheme against the ODE reference.
fn strong(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows) -> Result<()> {
    let coeffs = sde(spec)?.drift_only();
    let reference = reference_path(spec)?;
    let terminal = reference.terminal().to_vec();
    if !reference.converged() {
        rows.out
            .notes
            .push(format!("reference ({}) did not converge", reference.method().tag()));
    }
    for (gi, &eps) in eps_grid(cfg)?.iter().enumerate() {
        let errs = replicas(cfg.replicas, |r| {
            let p = simulate_path(&coeffs, &spec.x0, eps, spec.horizon, &replica_stream(cfg.seed, gi, r)?)?;
            let t: f64 = p.terminal().iter().zip(&terminal).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((path_sup_sq_error(&p, &reference), t))
        })?;
        let sup: Vec<f64> = errs.iter().map(|e| e.0).collect();
        let term: Vec<f64> = errs.iter().map(|e| e.1).collect();
        let sup = mean_ci(&sup);
        let term = mean_ci(&term);
        rows.push(eps, "sup_sq", sup);
        rows.push(eps, "sup_rms", sqrt_estimate(sup));
        rows.push(eps, "terminal_sq", term);
        if let Some(fsq) = spec.constant("f_sq_integral") {
            rows.push(eps, "isometry_ratio", scaled(term, 1.0 / (eps * fsq)));
        }
    }
    Ok(())
}

fn weak(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows) -> Result<()> {
    let w = spec
        .weak
        .as_ref()
        .ok_or_else(|| anyhow!("scenario '{}' has no weak-error functional", spec.name))?;
    let coeffs = sde(spec)?.drift_only();
    for (gi, &eps) in eps_grid(cfg)?.iter().enumerate() {
        let phi = replicas(cfg.replicas, |r| {
            let p = simulate_path(&coeffs, &spec.x0, eps, spec.horizon, &replica_stream(cfg.seed, gi, r)?)?;
            Ok((w.phi)(p.terminal()))
        })?;
        let mean = mean_ci(&phi);
        rows.push(eps, "phi_mean", mean);
        rows.push(eps, "weak_error", weak_error(&phi, w.limit));
        if let Some(exact) = &w.scheme_exact {
            let e = exact(eps);
            rows.value(eps, "scheme_exact", e, 0);
            let se = mean.ci / Z95;
            let z = (mean.value - e).abs() / se;
            rows.value(eps, "z_score", z, phi.len());
            rows.out
                .checks
                .push(Check::new(format!("z_score@{eps:e}"), z, "at most 4", z <= 4.0));
        }
    }
    Ok(())
}

fn invariant(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows, target: Option<Target>) -> Result<()> {
    let inv = spec
        .invariant
        .as_ref()
        .ok_or_else(|| anyhow!("scenario '{}' has no invariant functional", spec.name))?;
    let coeffs = sde(spec)?;
    for (gi, &eps) in eps_grid(cfg)?.iter().enumerate() {
        let avgs = replicas(cfg.replicas, |r| {
            let s = replica_stream(cfg.seed, gi, r)?;
            Ok(invariant_estimate(coeffs, &spec.x0, eps, inv.burn_in, inv.horizon, |x| (inv.g)(x), &s)?)
        })?;
        let e = mean_ci(&avgs);
        rows.push(eps, "time_average", e);
        rows.value(eps, "exact", inv.exact, 0);
        if let Some(t) = target {
            rows.out.checks.push(Check::against(format!("time_average@{eps:e}"), e.value, t));
        }
    }
    Ok(())
}

fn clt(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows, target: Option<Target>) -> Result<()> {
    if spec.x0.len() != 1 {
        bail!("the path-scale CLT is implemented in 1-D");
    }
    let coeffs = sde(spec)?.drift_only();
    let reference = reference_path(spec)?;
    let mut probe = [0.0];
    coeffs
        .drift_jacobian(0.0, &spec.x0, &mut probe)
        .context("the limit variance needs a drift derivative")?;
    let limit = clt_limit_variance(
        &reference,
        |t, x| {
            let mut out = [0.0];
            coeffs.drift(t, &[x], &mut out);
            out[0]
        },
        |t, x| {
            let mut out = [f64::NAN];
            let _ = coeffs.drift_jacobian(t, &[x], &mut out);
            out[0]
        },
        spec.horizon,
        LIMIT_QUADRATURE,
    );
    let ref_terminal = reference.terminal()[0];
    for (gi, &eps) in eps_grid(cfg)?.iter().enumerate() {
        let xs = replicas(cfg.replicas, |r| {
            let p = simulate_path(&coeffs, &spec.x0, eps, spec.horizon, &replica_stream(cfg.seed, gi, r)?)?;
            Ok(p.terminal()[0])
        })?;
        let c = clt_check(&xs, ref_terminal, eps, limit);
        rows.push(eps, "clt_variance", c.variance);
        rows.value(eps, "clt_limit", limit, 0);
        rows.push(
            eps,
            "clt_ratio",
            Estimate {
                value: c.ratio,
                ci: c.ratio_ci,
                replicas: xs.len(),
            },
        );
        if let Some(t) = target {
            rows.out.checks.push(Check::against(format!("clt_ratio@{eps:e}"), c.ratio, t));
        }
    }
    Ok(())
}

fn donsker(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows, target: Option<Target>) -> Result<()> {
    let (mean, var) = spec
        .terminal_law
        .ok_or_else(|| anyhow!("scenario '{}' has no Gaussian terminal law", spec.name))?;
    let law = Normal::new(mean, var.sqrt()).context("terminal law")?;
    let coeffs = sde(spec)?;
    if spec.x0.len() != 1 {
        bail!("the KS check is one-dimensional");
    }
    for (gi, &eps) in eps_grid(cfg)?.iter().enumerate() {
        let xs = replicas(cfg.replicas, |r| {
            let p = simulate_path(coeffs, &spec.x0, eps, spec.horizon, &replica_stream(cfg.seed, gi, r)?)?;
            Ok(p.terminal()[0])
        })?;
        let ks = ks_statistic(&xs, |x| law.cdf(x))?;
        // 95 % Kolmogorov critical value.
        let crit = 1.358 / (xs.len() as f64).sqrt();
        rows.push(
            eps,
            "ks",
            Estimate {
                value: ks,
                ci: crit,
                replicas: xs.len(),
            },
        );
        rows.push(eps, "terminal_mean", mean_ci(&xs));
        if let Some(t) = target {
            rows.out.checks.push(Check::against(format!("ks@{eps:e}"), ks, t));
        }
    }
    Ok(())
}

fn chaos(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows) -> Result<()> {
    let (kernel, law) = particles(spec)?;
    for (gi, &n) in n_grid(cfg)?.iter().enumerate() {
        let fs = root(cfg.seed, &[Label::new("grid", gi as u64), Label::purpose("flow")])?;
        let flow = Arc::new(LimitFlow::build(
            kernel,
            law,
            spec.horizon,
            &PicardOptions::for_particles(n),
            &fs,
        )?);
        let runs = replicas(cfg.replicas, |r| {
            Ok(simulate_coupled(
                kernel,
                law,
                n,
                spec.horizon,
                &replica_stream(cfg.seed, gi, r)?,
                flow.clone(),
            )?)
        })?;
        let e = chaos_error(&runs);
        let p = n as f64;
        rows.push(p, "chaos_sup_sq", e.pooled);
        rows.value(p, "chaos_max_particle", e.max_particle, runs.len());
        rows.value(p, "limit_sweeps", flow.sweeps() as f64, 0);
    }
    Ok(())
}

fn fluctuation(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows, target: Option<Target>) -> Result<()> {
    let (kernel, law) = particles(spec)?;
    let ls = root(cfg.seed, &[Label::purpose("limit")])?;
    let flow = LimitFlow::build(
        kernel,
        law,
        spec.horizon,
        &PicardOptions::for_particles(ENERGY_CLOUD),
        &ls,
    )?;
    let energy = limit_bracket_energy(&flow, law, ENERGY_CLOUD, 200, &ls);
    let opts = ParticleOptions {
        fluctuation: true,
        ..ParticleOptions::default()
    };
    for (gi, &n) in n_grid(cfg)?.iter().enumerate() {
        let runs = replicas(cfg.replicas, |r| {
            Ok(simulate_replica(
                kernel,
                law,
                n,
                spec.horizon,
                &replica_stream(cfg.seed, gi, r)?,
                &opts,
            )?)
        })?;
        let v = fluctuation_variance(&runs);
        let p = n as f64;
        rows.push(p, "fluct_variance", v);
        rows.value(p, "bracket_energy", energy, 0);
        let ratio = scaled(v, 1.0 / energy);
        rows.push(p, "fluct_ratio", ratio);
        if let Some(t) = target {
            rows.out.checks.push(Check::against(format!("fluct_ratio@{n}"), ratio.value, t));
        }
    }
    Ok(())
}

fn nse_config(n: &NseScenario, horizon: f64, eps: f64, paths: usize) -> NseConfig {
    NseConfig {
        nu: n.nu,
        eps,
        horizon,
        slices: n.slices,
        paths,
        picard_tol: n.picard_tol,
        control_variate: n.control_variate,
        ..NseConfig::default()
    }
}

fn nse(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows, target: Option<Target>) -> Result<()> {
    let n = match &spec.model {
        Model::Nse(n) => n,
        _ => bail!("scenario '{}' is not a vorticity model", spec.name),
    };
    let g = n.grid;
    let exact_w = (n.exact)(n.nu, spec.horizon, 0.0, g)?;
    let exact_u = biot_savart(&exact_w);
    let spectral = spectral_reference(&n.w0, n.nu, spec.horizon, &[0.0], g, n.reference_dt)?;
    let spectral_u = biot_savart(&spectral[0]);
    let spectral_gap = spectral_u.sup_distance(&exact_u).max(
        spectral[0]
            .values()
            .iter()
            .zip(exact_w.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    );
    let eps = eps_grid(cfg)?;
    let mut errors = Vec::with_capacity(eps.len());
    for (gi, &e) in eps.iter().enumerate() {
        let s = root(cfg.seed, &[Label::new("grid", gi as u64)])?;
        let sol = solve_nse_poisson(&n.w0, g, &nse_config(n, spec.horizon, e, cfg.replicas), &s)?;
        if !sol.converged {
            rows.out
                .notes
                .push(format!("Picard iteration at eps {e:e} stopped at max_iter; gaps {:?}", sol.gaps));
        }
        let err = sol.u[0].sup_distance(&exact_u);
        let floor = sol.noise_floor[0];
        rows.value(e, "u_sup_error", err, cfg.replicas);
        rows.value(e, "noise_floor", floor, cfg.replicas);
        rows.value(e, "corrected_error", err - floor, cfg.replicas);
        rows.value(e, "picard_sweeps", sol.gaps.len() as f64, 0);
        errors.push((e, err, err - floor));
    }
    rows.value(0.0, "spectral_gap", spectral_gap, 0);
    rows.out.checks.push(Check::new(
        "spectral_gap",
        spectral_gap,
        format!("at most {SPECTRAL_TOLERANCE:e}"),
        spectral_gap <= SPECTRAL_TOLERANCE,
    ));
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].0.total_cmp(&errors[a].0));
    for w in order.windows(2) {
        let (big, small) = (errors[w[0]], errors[w[1]]);
        rows.out.checks.push(Check::new(
            format!("decreasing@{:e}", small.0),
            small.1 - big.1,
            "negative",
            small.1 < big.1,
        ));
        let ratio = big.2 / small.2;
        rows.value(small.0, "halving_ratio", ratio, cfg.replicas);
        if let Some(t) = target {
            rows.out.checks.push(Check::against(format!("halving_ratio@{:e}", small.0), ratio, t));
        }
    }
    Ok(())
}

fn stable(cfg: &RunConfig, spec: &ScenarioSpec, rows: &mut Rows) -> Result<()> {
    let st = spec
        .stable
        .as_ref()
        .ok_or_else(|| anyhow!("scenario '{}' has no stable-noise checks", spec.name))?;
    let coeffs = sde(spec)?;
    let law = coeffs
        .law()
        .filter(|l| l.dim() == 1)
        .ok_or_else(|| anyhow!("stable checks need a 1-D jump law"))?;
    let alpha = law.alpha();
    let tail = LatticeTail::new(law);
    if spec.x0 != [0.0] {
        bail!("the tail prediction assumes a start at 0");
    }
    let eps = eps_grid(cfg)?;
    let mut cf: Vec<Vec<Estimate>> = Vec::with_capacity(eps.len());
    for (gi, &e) in eps.iter().enumerate() {
        let xs = replicas(cfg.replicas, |r| {
            let p = simulate_path(coeffs, &spec.x0, e, spec.horizon, &replica_stream(cfg.seed, gi, r)?)?;
            Ok(p.terminal()[0])
        })?;
        let mut at = Vec::with_capacity(st.frequencies.len());
        for &u in &st.frequencies {
            let c: Vec<f64> = xs.iter().map(|x| (u * x).cos()).collect();
            let est = mean_ci(&c);
            rows.push(e, &format!("cf_u{u}"), est);
            at.push(est);
        }
        cf.push(at);
        for &level in &st.tail_levels {
            let above = xs.iter().filter(|x| x.abs() > level).count();
            let above2 = xs.iter().filter(|x| x.abs() > 2.0 * level).count();
            let ratio = if above > 0 { above2 as f64 / above as f64 } else { f64::NAN };
            let ci = Z95 * (ratio * (1.0 - ratio) / above.max(1) as f64).sqrt();
            let pred = stable_tail_prediction(&tail, alpha, e, st.damping, spec.horizon, 2.0 * level)
                / stable_tail_prediction(&tail, alpha, e, st.damping, spec.horizon, level);
            rows.push(
                e,
                &format!("tail_ratio_R{level}"),
                Estimate {
                    value: ratio,
                    ci,
                    replicas: xs.len(),
                },
            );
            rows.value(e, &format!("tail_ratio_pred_R{level}"), pred, 0);
            let rel = (ratio / pred - 1.0).abs();
            rows.out.checks.push(Check::new(
                format!("tail_ratio_gap_R{level}@{e:e}"),
                rel,
                format!("relative gap at most {}", st.tail_tolerance),
                rel <= st.tail_tolerance,
            ));
        }
    }
    for k in 1..eps.len() {
        for (i, &u) in st.frequencies.iter().enumerate() {
            let (a, b) = (cf[k - 1][i], cf[k][i]);
            let gap = (a.value - b.value).abs();
            let bound = 3.0 * a.ci.hypot(b.ci);
            rows.out.checks.push(Check::new(
                format!("cf_u{u}@{:e}", eps[k]),
                gap,
                format!("at most 3 combined CI half-widths ({bound:.3e})"),
                gap <= bound,
            ));
        }
    }
    Ok(())
}

fn clock_tail(cfg: &RunConfig, rows: &mut Rows) -> Result<()> {
    let t = 1.0;
    for (gi, &e) in eps_grid(cfg)?.iter().enumerate() {
        let threshold = (std::f64::consts::E - 1.0) * t / e + CLOCK_TAIL_GAP;
        let counts = replicas(cfg.replicas, |r| {
            let mut s = replica_stream(cfg.seed, gi, r)?;
            Ok(Clock::build(e, t, &mut s).count(t))
        })?;
        let m = counts.len() as f64;
        let hits = counts.iter().filter(|&&c| c as f64 >= threshold).count() as f64;
        let p = hits / m;
        let bound = (-CLOCK_TAIL_GAP).exp();
        let se = (bound * (1.0 - bound) / m).sqrt();
        let mean: Vec<f64> = counts.iter().map(|&c| c as f64 * e / t).collect();
        rows.push(e, "count_mean_scaled", mean_ci(&mean));
        rows.push(
            e,
            "tail_prob",
            Estimate {
                value: p,
                ci: Z95 * (p * (1.0 - p) / m).sqrt(),
                replicas: counts.len(),
            },
        );
        rows.value(e, "tail_bound", bound, 0);
        rows.out.checks.push(Check::new(
            format!("tail_prob@{e:e}"),
            p,
            format!("at most e^-{CLOCK_TAIL_GAP} + 3 se = {:.4e}", bound + 3.0 * se),
            p <= bound + 3.0 * se,
        ));
    }
    Ok(())
}
