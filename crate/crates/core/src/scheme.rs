//! Compound-Poisson integrator.
//!
//! A path is the Markov chain
//! `Γ_{n+1} = Γ_n + σ_ε(S_{n+1}, Γ_n, ξ_{n+1}) + b_ε(S_{n+1}, Γ_n)`
//! embedded at the jump times `S_n` of a Poisson clock with intensity `1/ε`,
//! so that `X_t = Γ_{N_t}`. Drift and jump scalings:
//!
//! * `b_ε = ε b / (1 + √ε |b|^{1-1/m})` with taming, `ε b` without;
//! * `σ_ε = √ε σ(t, x, z)` for `α = 2`, `σ(t, x, ε^{1/α} z)` for `α < 2`.

use std::io::{self, Write};
use std::sync::Arc;

use crate::randomness::{required_iterations, JumpLaw, Label, RngStream};

/// `b(t, x)` written into `out`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `σ(t, x, z)` written into `out`; must be odd in `z`.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `∇b(t, x)` as a row-major `d × d` matrix, `out[i*d + k] = ∂_k b_i`.
pub type JacobianFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// States whose norm exceeds this abort the path.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Slack `n` in the event budget; truncation probability `≤ e^{-n}`.
pub const EVENT_BUDGET_SLACK: u64 = 50;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("path diverged at step {step} (t = {time})")]
    Divergence { step: usize, time: f64 },
    #[error("event budget {budget} exhausted before the horizon")]
    Truncation { budget: u64 },
    #[error("time {t} is outside the path horizon [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("coefficient set has no {0}")]
    Missing(&'static str),
}

/// Drift, jump coefficient, growth exponent and taming switch of one SDE.
#[derive(Clone)]
pub struct CoefficientSet {
    dim: usize,
    drift: Option<DriftFn>,
    diffusion: Option<DiffusionFn>,
    drift_jacobian: Option<JacobianFn>,
    law: Option<Arc<JumpLaw>>,
    growth_exponent: f64,
    taming: bool,
    alpha: f64,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("drift", &self.drift.is_some())
            .field("diffusion", &self.diffusion.is_some())
            .field("growth_exponent", &self.growth_exponent)
            .field("taming", &self.taming)
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl CoefficientSet {
    /// Zero drift, no noise, `m = 1`, untamed.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            dim,
            drift: None,
            diffusion: None,
            drift_jacobian: None,
            law: None,
            growth_exponent: 1.0,
            taming: false,
            alpha: 2.0,
        }
    }

    pub fn with_drift<F>(mut self, b: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift = Some(Arc::new(b));
        self
    }

    pub fn with_drift_jacobian<F>(mut self, grad: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(grad));
        self
    }

    /// Jump coefficient `σ(t, x, z)` driven by `law`; `α` is taken from the law.
    pub fn with_diffusion<F>(mut self, sigma: F, law: Arc<JumpLaw>) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert_eq!(law.dim(), self.dim, "jump law dimension mismatch");
        self.alpha = law.alpha();
        self.diffusion = Some(Arc::new(sigma));
        self.law = Some(law);
        self
    }

    /// Additive noise `σ(t, x, z) = z`.
    pub fn with_additive_noise(self, law: Arc<JumpLaw>) -> Self {
        self.with_diffusion(|_, _, z, out| out.copy_from_slice(z), law)
    }

    /// Growth exponent `m ≥ 1`; switches taming on for `m > 1`.
    pub fn with_growth_exponent(mut self, m: f64) -> Self {
        assert!(m >= 1.0, "growth exponent must be at least 1");
        self.growth_exponent = m;
        self.taming = m > 1.0;
        self
    }

    /// Override the taming default.
    pub fn with_taming(mut self, taming: bool) -> Self {
        if !taming && self.growth_exponent > 1.0 {
            log::warn!(
                "taming disabled for growth exponent {}; paths may diverge",
                self.growth_exponent
            );
        }
        self.taming = taming;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn growth_exponent(&self) -> f64 {
        self.growth_exponent
    }

    pub fn taming(&self) -> bool {
        self.taming
    }

    pub fn law(&self) -> Option<&Arc<JumpLaw>> {
        self.law.as_ref()
    }

    pub fn has_diffusion(&self) -> bool {
        self.diffusion.is_some()
    }

    /// Same coefficients with the jump part removed.
    pub fn drift_only(&self) -> Self {
        let mut c = self.clone();
        c.diffusion = None;
        c.law = None;
        c.alpha = 2.0;
        c
    }

    /// Evaluate `b(t, x)`; zero when no drift is set.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(b) => b(t, x, out),
            None => out.fill(0.0),
        }
    }

    /// Evaluate `σ(t, x, z)`; zero when no jump coefficient is set.
    pub fn diffusion(&self, t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Some(s) => s(t, x, z, out),
            None => out.fill(0.0),
        }
    }

    pub fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), SchemeError> {
        match &self.drift_jacobian {
            Some(g) => {
                g(t, x, out);
                Ok(())
            }
            None if self.drift.is_none() => {
                out.fill(0.0);
                Ok(())
            }
            None => Err(SchemeError::Missing("drift gradient")),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_eps(eps: f64) -> Result<(), SchemeError> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(SchemeError::InvalidParameter(format!(
            "step ε = {eps} outside (0, 1]"
        )))
    }
}

/// `b_ε` from a drift value `b`.
pub fn tame_drift(
    b: &[f64],
    m: f64,
    eps: f64,
    taming: bool,
    out: &mut [f64],
) -> Result<(), SchemeError> {
    if !(m >= 1.0) {
        return Err(SchemeError::InvalidParameter(format!(
            "growth exponent {m} below 1"
        )));
    }
    check_eps(eps)?;
    let factor = if taming {
        eps / (1.0 + eps.sqrt() * norm(b).powf(1.0 - 1.0 / m))
    } else {
        eps
    };
    for (o, &v) in out.iter_mut().zip(b) {
        *o = factor * v;
    }
    Ok(())
}

/// `σ_ε(t, x, z)`.
pub fn scale_diffusion(
    coeffs: &CoefficientSet,
    eps: f64,
    t: f64,
    x: &[f64],
    z: &[f64],
    out: &mut [f64],
) {
    if coeffs.alpha >= 2.0 {
        coeffs.diffusion(t, x, z, out);
        let s = eps.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    } else {
        let s = eps.powf(1.0 / coeffs.alpha);
        let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
        coeffs.diffusion(t, x, &zs, out);
    }
}

/// Reusable single-step kernel with scratch buffers.
pub struct Stepper<'a> {
    coeffs: &'a CoefficientSet,
    eps: f64,
    jump_scale: f64,
    b: Vec<f64>,
    bt: Vec<f64>,
    z: Vec<f64>,
    sig: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(coeffs: &'a CoefficientSet, eps: f64) -> Result<Self, SchemeError> {
        check_eps(eps)?;
        let d = coeffs.dim;
        let jump_scale = if coeffs.alpha >= 2.0 {
            eps.sqrt()
        } else {
            eps.powf(1.0 / coeffs.alpha)
        };
        Ok(Self {
            coeffs,
            eps,
            jump_scale,
            b: vec![0.0; d],
            bt: vec![0.0; d],
            z: vec![0.0; d],
            sig: vec![0.0; d],
        })
    }

    /// `b_ε(t, x)` into the internal buffer.
    #[inline]
    fn tamed(&mut self, t: f64, x: &[f64]) {
        self.coeffs.drift(t, x, &mut self.b);
        let factor = if self.coeffs.taming {
            let m = self.coeffs.growth_exponent;
            self.eps / (1.0 + self.eps.sqrt() * norm(&self.b).powf(1.0 - 1.0 / m))
        } else {
            self.eps
        };
        for (o, &v) in self.bt.iter_mut().zip(&self.b) {
            *o = factor * v;
        }
    }

    /// Advance `state` in place across the jump at `t_next` with jump `xi`.
    /// `index` is the 1-based index of the new state, used in errors.
    #[inline]
    pub fn advance(
        &mut self,
        t_next: f64,
        state: &mut [f64],
        xi: Option<&[f64]>,
        index: usize,
    ) -> Result<(), SchemeError> {
        self.tamed(t_next, state);
        match (xi, &self.coeffs.diffusion) {
            (Some(xi), Some(sigma)) => {
                if self.coeffs.alpha >= 2.0 {
                    sigma(t_next, state, xi, &mut self.sig);
                    for v in &mut self.sig {
                        *v *= self.jump_scale;
                    }
                } else {
                    for (zs, &z) in self.z.iter_mut().zip(xi) {
                        *zs = z * self.jump_scale;
                    }
                    sigma(t_next, state, &self.z, &mut self.sig);
                }
                for k in 0..state.len() {
                    state[k] += self.sig[k] + self.bt[k];
                }
            }
            _ => {
                for k in 0..state.len() {
                    state[k] += self.bt[k];
                }
            }
        }
        let n = norm(state);
        if !n.is_finite() || n > DIVERGENCE_THRESHOLD {
            return Err(SchemeError::Divergence {
                step: index,
                time: t_next,
            });
        }
        Ok(())
    }
}

/// One step of the chain from `(t_prev, Γ_n)` to `Γ_{n+1}`.
pub fn step(
    t_prev: f64,
    state: &[f64],
    s_next: f64,
    xi: &[f64],
    coeffs: &CoefficientSet,
    eps: f64,
) -> Result<Vec<f64>, SchemeError> {
    if !(s_next > t_prev) {
        return Err(SchemeError::InvalidParameter(format!(
            "jump time {s_next} not after {t_prev}"
        )));
    }
    let mut next = state.to_vec();
    Stepper::new(coeffs, eps)?.advance(s_next, &mut next, Some(xi), 1)?;
    Ok(next)
}

/// Clock times and jump draws of one path, kept so a path can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingNoise {
    pub eps: f64,
    pub horizon: f64,
    pub dim: usize,
    pub times: Vec<f64>,
    /// Flat jumps, `dim` per event; empty for drift-only coefficient sets.
    pub jumps: Vec<f64>,
}

impl DrivingNoise {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn jump(&self, n: usize) -> Option<&[f64]> {
        if self.jumps.is_empty() {
            None
        } else {
            Some(&self.jumps[n * self.dim..(n + 1) * self.dim])
        }
    }
}

/// Sub-stream of `stream` feeding the clock.
pub fn clock_stream(stream: &RngStream) -> RngStream {
    stream.child(Label::purpose("clock"))
}

/// Sub-stream of `stream` feeding the jump draws.
pub fn jump_stream(stream: &RngStream) -> RngStream {
    stream.child(Label::purpose("jumps"))
}

/// Draw the clock and jumps of a path on `[0, horizon]`.
pub fn sample_noise(
    eps: f64,
    horizon: f64,
    dim: usize,
    law: Option<&JumpLaw>,
    stream: &RngStream,
) -> Result<DrivingNoise, SchemeError> {
    let budget = required_iterations(eps, horizon, EVENT_BUDGET_SLACK);
    let mut clock = clock_stream(stream);
    let mut jumps_rng = jump_stream(stream);
    let mut times = Vec::with_capacity((horizon / eps) as usize + 16);
    let mut jumps = Vec::new();
    let mut buf = vec![0.0; dim];
    let mut t = 0.0;
    loop {
        t += eps * clock.exponential();
        if t > horizon {
            break;
        }
        if times.len() as u64 >= budget {
            return Err(SchemeError::Truncation { budget });
        }
        times.push(t);
        if let Some(law) = law {
            law.sample_into(&mut jumps_rng, &mut buf);
            jumps.extend_from_slice(&buf);
        }
    }
    Ok(DrivingNoise {
        eps,
        horizon,
        dim,
        times,
        jumps,
    })
}

/// Piecewise-constant càdlàg path: `times[0] = 0`, `states` holds `Γ_0..Γ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemePath {
    dim: usize,
    eps: f64,
    horizon: f64,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl SchemePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of jumps `N_T`.
    pub fn event_count(&self) -> usize {
        self.times.len() - 1
    }

    /// Jump times with `S_0 = 0` prepended.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `Γ_n`.
    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.dim..(n + 1) * self.dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.event_count())
    }

    /// `N_t`, the index of the state in force at `t`.
    pub fn index_at(&self, t: f64) -> Result<usize, SchemeError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(SchemeError::OutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.times.partition_point(|&s| s <= t) - 1)
    }

    /// `X_t = Γ_{N_t}` (right-continuous at jump times).
    pub fn evaluate(&self, t: f64) -> Result<&[f64], SchemeError> {
        Ok(self.state(self.index_at(t)?))
    }

    /// Left limit `X_{t-}`: at a jump time `S_n` this is `Γ_{n-1}`.
    pub fn left_limit(&self, t: f64) -> Result<&[f64], SchemeError> {
        let n = self.index_at(t)?;
        if n > 0 && self.times[n] == t {
            Ok(self.state(n - 1))
        } else {
            Ok(self.state(n))
        }
    }

    /// CSV dump with header `n,S_n,state_1,…,state_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "n,S_n")?;
        for k in 1..=self.dim {
            write!(w, ",state_{k}")?;
        }
        writeln!(w)?;
        for n in 0..self.times.len() {
            write!(w, "{n},{}", self.times[n])?;
            for v in self.state(n) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Fold the chain over recorded noise, starting from event `start`
/// (0 = from the initial time) with state `x_start`.
pub fn integrate_from(
    coeffs: &CoefficientSet,
    noise: &DrivingNoise,
    start: usize,
    x_start: &[f64],
) -> Result<SchemePath, SchemeError> {
    let d = coeffs.dim;
    let mut stepper = Stepper::new(coeffs, noise.eps)?;
    let t0 = if start == 0 { 0.0 } else { noise.times[start - 1] };
    let remaining = noise.len() - start;
    let mut times = Vec::with_capacity(remaining + 1);
    let mut states = Vec::with_capacity((remaining + 1) * d);
    times.push(t0);
    states.extend_from_slice(x_start);
    let mut x = x_start.to_vec();
    for n in start..noise.len() {
        let xi = if coeffs.diffusion.is_some() {
            noise.jump(n)
        } else {
            None
        };
        stepper.advance(noise.times[n], &mut x, xi, n + 1)?;
        times.push(noise.times[n]);
        states.extend_from_slice(&x);
    }
    Ok(SchemePath {
        dim: d,
        eps: noise.eps,
        horizon: noise.horizon,
        times,
        states,
    })
}

/// Fold the chain over the whole of `noise`.
pub fn integrate(
    coeffs: &CoefficientSet,
    x0: &[f64],
    noise: &DrivingNoise,
) -> Result<SchemePath, SchemeError> {
    integrate_from(coeffs, noise, 0, x0)
}

/// Run the chain on `[0, horizon]`, calling `observe(n, S_n, Γ_n)` after each
/// jump. Uses the same sub-streams as [`sample_noise`], so results agree
/// with [`simulate_path`]. Returns the terminal state.
pub fn drive<F>(
    coeffs: &CoefficientSet,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    stream: &RngStream,
    mut observe: F,
) -> Result<Vec<f64>, SchemeError>
where
    F: FnMut(usize, f64, &[f64]),
{
    if !(horizon > 0.0) {
        return Err(SchemeError::InvalidParameter(format!(
            "horizon {horizon} must be positive"
        )));
    }
    let mut stepper = Stepper::new(coeffs, eps)?;
    let budget = required_iterations(eps, horizon, EVENT_BUDGET_SLACK);
    let mut clock = clock_stream(stream);
    let mut jumps_rng = jump_stream(stream);
    let law = coeffs.law.as_deref().filter(|_| coeffs.diffusion.is_some());
    let mut xi = vec![0.0; coeffs.dim];
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut n = 0usize;
    loop {
        t += eps * clock.exponential();
        if t > horizon {
            break;
        }
        if n as u64 >= budget {
            return Err(SchemeError::Truncation { budget });
        }
        n += 1;
        match law {
            Some(law) => {
                law.sample_into(&mut jumps_rng, &mut xi);
                stepper.advance(t, &mut x, Some(&xi), n)?;
            }
            None => stepper.advance(t, &mut x, None, n)?,
        }
        observe(n, t, &x);
    }
    Ok(x)
}

/// Simulate one path on `[0, horizon]`.
pub fn simulate_path(
    coeffs: &CoefficientSet,
    x0: &[f64],
    eps: f64,
    horizon: f64,
    stream: &RngStream,
) -> Result<SchemePath, SchemeError> {
    if !(horizon > 0.0) {
        return Err(SchemeError::InvalidParameter(format!(
            "horizon {horizon} must be positive"
        )));
    }
    if coeffs.diffusion.is_some() && coeffs.law.is_none() {
        return Err(SchemeError::Missing("jump law"));
    }
    let law = coeffs.law.as_deref().filter(|_| coeffs.diffusion.is_some());
    let noise = sample_noise(eps, horizon, coeffs.dim, law, stream)?;
    integrate(coeffs, x0, &noise)
}

/// `ℒ^(ε) f(t, x) = Σ_z p(z) [f(x + σ_ε(t,x,z) + b_ε(t,x)) − f(x)] / ε`.
pub fn generator_apply<F>(
    f: F,
    t: f64,
    x: &[f64],
    coeffs: &CoefficientSet,
    law: &JumpLaw,
    eps: f64,
) -> Result<f64, SchemeError>
where
    F: Fn(&[f64]) -> f64,
{
    check_eps(eps)?;
    let d = coeffs.dim;
    let mut b = vec![0.0; d];
    let mut bt = vec![0.0; d];
    coeffs.drift(t, x, &mut b);
    tame_drift(&b, coeffs.growth_exponent, eps, coeffs.taming, &mut bt)?;
    let fx = f(x);
    let mut z = vec![0.0; d];
    let mut sig = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut acc = 0.0;
    for (atom, p) in law.atoms() {
        for (zk, &a) in z.iter_mut().zip(atom) {
            *zk = f64::from(a);
        }
        if coeffs.diffusion.is_some() {
            scale_diffusion(coeffs, eps, t, x, &z, &mut sig);
        } else {
            sig.fill(0.0);
        }
        for k in 0..d {
            y[k] = x[k] + sig[k] + bt[k];
        }
        acc += p * (f(&y) - fx);
    }
    Ok(acc / eps)
}

/// Jacobian determinants along a replayed path.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFlow {
    /// `det J_n` for `n = 0..=N`.
    pub determinants: Vec<f64>,
    /// `J_N`, row-major.
    pub last: Vec<f64>,
    /// Set when some `|det J_n|` fell below `1e-12`.
    pub singular: bool,
}

fn determinant(m: &[f64], d: usize) -> f64 {
    // Gaussian elimination with partial pivoting on a copy.
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
            .unwrap();
        if a[pivot * d + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
            }
            det = -det;
        }
        let p = a[col * d + col];
        det *= p;
        for row in col + 1..d {
            let f = a[row * d + col] / p;
            for k in col..d {
                a[row * d + k] -= f * a[col * d + k];
            }
        }
    }
    det
}

/// `∇b_ε(t, x)` including the taming factor.
fn tamed_jacobian(
    coeffs: &CoefficientSet,
    eps: f64,
    t: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<(), SchemeError> {
    let d = coeffs.dim;
    let mut grad = vec![0.0; d * d];
    coeffs.drift_jacobian(t, x, &mut grad)?;
    if !coeffs.taming {
        for (o, g) in out.iter_mut().zip(&grad) {
            *o = eps * g;
        }
        return Ok(());
    }
    let m = coeffs.growth_exponent;
    let mut b = vec![0.0; d];
    coeffs.drift(t, x, &mut b);
    let nb = norm(&b);
    let se = eps.sqrt();
    let g = nb.powf(1.0 - 1.0 / m);
    let denom = 1.0 + se * g;
    // ∂_k g = (1 - 1/m) |b|^{-1-1/m} Σ_i b_i ∂_k b_i
    let mut dg = vec![0.0; d];
    if nb > 0.0 && m > 1.0 {
        let c = (1.0 - 1.0 / m) * nb.powf(-1.0 - 1.0 / m);
        for k in 0..d {
            dg[k] = c * (0..d).map(|i| b[i] * grad[i * d + k]).sum::<f64>();
        }
    }
    for i in 0..d {
        for k in 0..d {
            out[i * d + k] = eps * grad[i * d + k] / denom - eps * b[i] * se * dg[k] / (denom * denom);
        }
    }
    Ok(())
}

/// Replay `J_{n+1} = (I + ∇b_ε(S_{n+1}, Γ_n)) J_n`, `J_0 = I`.
pub fn path_jacobian(
    path: &SchemePath,
    coeffs: &CoefficientSet,
) -> Result<JacobianFlow, SchemeError> {
    let d = coeffs.dim;
    let eps = path.eps;
    let mut j = vec![0.0; d * d];
    for i in 0..d {
        j[i * d + i] = 1.0;
    }
    let mut step_m = vec![0.0; d * d];
    let mut next = vec![0.0; d * d];
    let mut determinants = Vec::with_capacity(path.times.len());
    determinants.push(1.0);
    let mut singular = false;
    for n in 0..path.event_count() {
        tamed_jacobian(coeffs, eps, path.times[n + 1], path.state(n), &mut step_m)?;
        for i in 0..d {
            step_m[i * d + i] += 1.0;
        }
        for i in 0..d {
            for k in 0..d {
                next[i * d + k] = (0..d).map(|l| step_m[i * d + l] * j[l * d + k]).sum();
            }
        }
        std::mem::swap(&mut j, &mut next);
        let det = determinant(&j, d);
        singular |= det.abs() < 1e-12;
        determinants.push(det);
    }
    Ok(JacobianFlow {
        determinants,
        last: j,
        singular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::{build_jump_law, derive_stream};
    use proptest::prelude::*;

    fn stream(seed: u64, r: u64) -> RngStream {
        derive_stream(seed, &[Label::replica(r)]).unwrap()
    }

    fn axis(d: usize) -> Arc<JumpLaw> {
        Arc::new(build_jump_law(2.0, d, None).unwrap())
    }

    #[test]
    fn taming_examples() {
        let mut out = [1.0];
        tame_drift(&[0.0], 2.0, 0.5, true, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        tame_drift(&[4.0], 2.0, 0.25, true, &mut out).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
        tame_drift(&[4.0], 1.0, 0.25, false, &mut out).unwrap();
        assert_eq!(out[0], 1.0);
        assert!(tame_drift(&[1.0], 0.5, 0.1, true, &mut out).is_err());
        assert!(tame_drift(&[1.0], 2.0, 1.5, true, &mut out).is_err());
    }

    proptest! {
        #[test]
        fn tamed_drift_bound(b in prop::collection::vec(-1e3f64..1e3, 1..4),
                             m in 1.0f64..5.0, eps in 1e-4f64..1.0) {
            let mut out = vec![0.0; b.len()];
            tame_drift(&b, m, eps, true, &mut out).unwrap();
            let nb = norm(&b);
            let bound = (eps * nb).min(eps.sqrt() * nb.powf(1.0 / m));
            prop_assert!(norm(&out) <= bound * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn diffusion_scaling_examples() {
        let c = CoefficientSet::new(2).with_additive_noise(axis(2));
        let mut out = [0.0; 2];
        scale_diffusion(&c, 0.04, 0.0, &[0.0, 0.0], &[1.0, 0.0], &mut out);
        assert!((out[0] - 0.2).abs() < 1e-15 && out[1] == 0.0);

        let cauchy = Arc::new(build_jump_law(1.0, 1, Some(100.0)).unwrap());
        let c = CoefficientSet::new(1).with_additive_noise(cauchy);
        let mut out = [0.0];
        scale_diffusion(&c, 0.1, 0.0, &[0.0], &[3.0], &mut out);
        assert!((out[0] - 0.3).abs() < 1e-15);
        scale_diffusion(&c, 0.1, 0.0, &[0.0], &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn step_examples() {
        let c = CoefficientSet::new(1).with_additive_noise(axis(1));
        let eps: f64 = 0.09;
        let next = step(0.0, &[1.0], 0.5, &[1.0], &c, eps).unwrap();
        assert!((next[0] - (1.0 + eps.sqrt())).abs() < 1e-15);
        let next = step(0.0, &[1.0], 0.5, &[0.0], &c, eps).unwrap();
        assert_eq!(next[0], 1.0);

        let decay = CoefficientSet::new(1).with_drift(|_, x, out| out[0] = -x[0]);
        let next = step(0.0, &[1.0], 0.1, &[0.0], &decay, 0.1).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
        assert!(step(0.5, &[1.0], 0.5, &[0.0], &decay, 0.1).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let blowup = CoefficientSet::new(1)
            .with_drift(|_, x, out| out[0] = x[0].powi(3))
            .with_growth_exponent(3.0)
            .with_taming(false);
        let err = simulate_path(&blowup, &[10.0], 0.5, 50.0, &stream(1, 0)).unwrap_err();
        assert!(matches!(err, SchemeError::Divergence { .. }));
    }

    #[test]
    fn evaluation_is_cadlag() {
        let c = CoefficientSet::new(1).with_additive_noise(axis(1));
        let path = simulate_path(&c, &[0.5], 0.1, 2.0, &stream(2, 0)).unwrap();
        assert!(path.event_count() >= 3);
        let t = path.times();
        assert_eq!(path.evaluate(0.0).unwrap(), &[0.5]);
        let mid = 0.5 * (t[1] + t[2]);
        assert_eq!(path.evaluate(mid).unwrap(), path.state(1));
        assert_eq!(path.evaluate(t[2]).unwrap(), path.state(2));
        assert_eq!(path.left_limit(t[2]).unwrap(), path.state(1));
        assert!(matches!(
            path.evaluate(2.5),
            Err(SchemeError::OutOfRange { .. })
        ));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn drive_matches_simulate_path() {
        let c = CoefficientSet::new(1)
            .with_drift(|t, x, out| out[0] = x[0].sin() + t.cos())
            .with_additive_noise(axis(1));
        let s = stream(3, 7);
        let path = simulate_path(&c, &[0.2], 0.01, 1.0, &s).unwrap();
        let mut count = 0;
        let end = drive(&c, &[0.2], 0.01, 1.0, &s, |n, t, x| {
            count = n;
            assert_eq!(t, path.times()[n]);
            assert_eq!(x, path.state(n));
        })
        .unwrap();
        assert_eq!(end, path.terminal());
        assert_eq!(count, path.event_count());
    }

    #[test]
    fn splicing_at_event_boundaries() {
        let c = CoefficientSet::new(2)
            .with_drift(|_, x, out| {
                out[0] = -x[1] - 0.3 * x[0];
                out[1] = x[0].sin();
            })
            .with_additive_noise(axis(2));
        let noise = sample_noise(0.05, 2.0, 2, c.law().map(|l| &**l), &stream(4, 0)).unwrap();
        let full = integrate(&c, &[1.0, -1.0], &noise).unwrap();
        for r in [1, noise.len() / 3, noise.len() / 2, noise.len()] {
            let head = full.state(r).to_vec();
            let tail = integrate_from(&c, &noise, r, &head).unwrap();
            assert_eq!(tail.terminal(), full.terminal());
            for k in 0..tail.event_count() {
                assert_eq!(tail.state(k), full.state(r + k));
            }
        }
    }

    #[test]
    fn constant_drift_mean() {
        let c = CoefficientSet::new(1).with_drift(|_, _, out| out[0] = 2.0);
        let (eps, t, reps) = (0.01, 1.0, 10_000);
        let xs: Vec<f64> = (0..reps)
            .map(|r| simulate_path(&c, &[1.0], eps, t, &stream(5, r)).unwrap().terminal()[0])
            .collect();
        // X_T = x0 + ε c N_T exactly.
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((mean - 3.0).abs() < 4.0 * sd / (reps as f64).sqrt(), "mean {mean}");
        for x in xs.iter().take(50) {
            let n = (x - 1.0) / (eps * 2.0);
            assert!((n - n.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn oscillatory_isometry() {
        let f = |s: f64| (1.0 - 2.0 * (((200.0 * s).floor() as i64) % 2) as f64) * 100.0;
        let c = CoefficientSet::new(1).with_drift(move |t, _, out| out[0] = f(t));
        let eps = 1e-4;
        let reps = 2000;
        // ∫_0^1 f = 0 (one hundred full periods).
        let mse = (0..reps)
            .map(|r| {
                let x = drive(&c, &[0.0], eps, 1.0, &stream(6, r), |_, _, _| {}).unwrap();
                x[0] * x[0]
            })
            .sum::<f64>()
            / reps as f64;
        let ratio = mse / (eps * 1e4);
        assert!((0.85..=1.15).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn donsker_limit() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let c = CoefficientSet::new(1).with_additive_noise(axis(1));
        let mut xs: Vec<f64> = (0..5000)
            .map(|r| drive(&c, &[0.0], 1e-3, 1.0, &stream(7, r), |_, _, _| {}).unwrap()[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.03, "ks {ks}");
    }

    #[test]
    fn second_moment_recursion() {
        // X_T = x0 (1-ε)^{N_T}, so E X_T² = x0² exp((ε-2)T).
        let c = CoefficientSet::new(1).with_drift(|_, x, out| out[0] = -x[0]);
        let (eps, reps) = (0.1, 20_000);
        let sq: Vec<f64> = (0..reps)
            .map(|r| drive(&c, &[1.0], eps, 1.0, &stream(8, r), |_, _, _| {}).unwrap()[0].powi(2))
            .collect();
        let mean = sq.iter().sum::<f64>() / reps as f64;
        let sd = (sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let exact = (eps - 2.0f64).exp();
        assert!((mean - exact).abs() < 4.0 * sd / (reps as f64).sqrt());
    }

    #[test]
    fn linear_drift_mean_follows_matrix_exponential() {
        // b(x) = A x with A = [[-0.5, 1], [-1, -0.5]]: e^{At} = e^{-t/2} R(t).
        let c = CoefficientSet::new(2)
            .with_drift(|_, x, out| {
                out[0] = -0.5 * x[0] + x[1];
                out[1] = -x[0] - 0.5 * x[1];
            })
            .with_additive_noise(axis(2));
        let (eps, t, reps) = (0.02, 1.5, 8000);
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for r in 0..reps {
            let x = drive(&c, &[1.0, 0.0], eps, t, &stream(9, r), |_, _, _| {}).unwrap();
            for k in 0..2 {
                sums[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        let decay = (-0.5 * t).exp();
        let exact = [decay * t.cos(), -decay * t.sin()];
        for k in 0..2 {
            let mean = sums[k] / reps as f64;
            let sd = (sq[k] / reps as f64 - mean * mean).sqrt();
            assert!(
                (mean - exact[k]).abs() < 4.0 * sd / (reps as f64).sqrt(),
                "k={k} mean={mean} exact={}",
                exact[k]
            );
        }
    }

    #[test]
    fn generator_examples() {
        let law = build_jump_law(2.0, 1, None).unwrap();
        let noise = CoefficientSet::new(1).with_additive_noise(Arc::new(law.clone()));
        let g = generator_apply(|_| 3.0, 0.0, &[1.3], &noise, &law, 0.1).unwrap();
        assert_eq!(g, 0.0);

        let decay = CoefficientSet::new(1).with_drift(|_, x, out| out[0] = -x[0]);
        let g = generator_apply(|x| x[0], 0.0, &[2.0], &decay, &law, 0.1).unwrap();
        assert!((g + 2.0).abs() < 1e-12);

        for x in [-1.0, 0.0, 2.5] {
            let g = generator_apply(|y| y[0] * y[0], 0.0, &[x], &noise, &law, 0.01).unwrap();
            assert!((g - 1.0).abs() < 1e-9, "g = {g}");
        }
    }

    #[test]
    fn generator_matches_short_time_expectation() {
        // Dynkin: E f(X_h) - f(x) = E ∫_0^h ℒf(X_s) ds = h ℒf(x) + O(h ε).
        let law = build_jump_law(2.0, 1, None).unwrap();
        let c = CoefficientSet::new(1)
            .with_drift(|_, x, out| out[0] = x[0].sin() - 0.5 * x[0])
            .with_additive_noise(Arc::new(law.clone()));
        let f = |x: &[f64]| (x[0] * 1.3).cos() + x[0];
        let (eps, x0) = (0.05, 0.7);
        let h = eps / 10.0;
        let lf = generator_apply(f, 0.0, &[x0], &c, &law, eps).unwrap();
        let reps = 400_000;
        let diffs: Vec<f64> = (0..reps)
            .map(|r| {
                let x = drive(&c, &[x0], eps, h, &stream(10, r), |_, _, _| {}).unwrap();
                f(&x) - f(&[x0])
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / reps as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / reps as f64).sqrt();
        let est = mean / h;
        let ci = 4.0 * sd / (reps as f64).sqrt() / h;
        assert!((est - lf).abs() < ci, "est {est} lf {lf} ci {ci}");
    }

    #[test]
    fn stable_generator_approaches_limit() {
        // ℒ^(0) cos(x) = cos(x) ∫_R (cos z - 1) c0 |z|^{-1-α} dz. Quadrature on
        // (0, Z] after z = w², plus the tail beyond Z by integration by parts.
        // 1 - cos z is written as 2 sin²(z/2) to keep the mass near z = 0.
        let alpha = 1.5;
        let law = build_jump_law(alpha, 1, None).unwrap();
        let c = CoefficientSet::new(1).with_additive_noise(Arc::new(law.clone()));
        let c0 = law.c0();
        let quad = {
            let big_z = 200.0f64;
            let (wmax, n) = (big_z.sqrt(), 2_000_000);
            let h = wmax / n as f64;
            let g = |w: f64| {
                if w == 0.0 {
                    return -2.0;
                }
                let z = w * w;
                -4.0 * (0.5 * z).sin().powi(2) * z.powf(-1.0 - alpha) * 2.0 * w
            };
            let mut s = g(0.0) + g(wmax);
            for i in 1..n {
                let wt = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += wt * g(i as f64 * h);
            }
            let cos_tail = -big_z.sin() * big_z.powf(-1.0 - alpha)
                - (1.0 + alpha) * big_z.cos() * big_z.powf(-2.0 - alpha);
            s * h / 3.0 + 2.0 * (cos_tail - big_z.powf(-alpha) / alpha)
        };
        let x = 0.4f64;
        let limit = c0 * quad * x.cos();
        let closed = -2.0 * c0 * (-statrs::function::gamma::gamma(-alpha)) * (std::f64::consts::PI * alpha / 2.0).cos() * x.cos();
        assert!((limit - closed).abs() < 1e-6 * closed.abs(), "{limit} vs {closed}");
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&eps| {
                (generator_apply(|y| y[0].cos(), 0.0, &[x], &c, &law, eps).unwrap() - limit).abs()
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn jacobian_identity_without_drift() {
        let c = CoefficientSet::new(2).with_additive_noise(axis(2));
        let path = simulate_path(&c, &[0.0, 0.0], 0.1, 1.0, &stream(11, 0)).unwrap();
        let flow = path_jacobian(&path, &c).unwrap();
        assert!(flow.determinants.iter().all(|&d| d == 1.0));
        assert_eq!(flow.last, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn jacobian_of_rotation_drift() {
        let c = CoefficientSet::new(2)
            .with_drift(|_, x, out| {
                out[0] = x[1];
                out[1] = -x[0];
            })
            .with_drift_jacobian(|_, _, out| out.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]));
        let eps = 0.05;
        let path = simulate_path(&c, &[1.0, 0.0], eps, 2.0, &stream(12, 0)).unwrap();
        let flow = path_jacobian(&path, &c).unwrap();
        for (n, d) in flow.determinants.iter().enumerate() {
            let exact = (1.0 + eps * eps).powi(n as i32);
            assert!((d - exact).abs() < 1e-12 * exact);
        }
        assert!(!flow.singular);
    }

    #[test]
    fn jacobian_growth_for_divergence_free_drift() {
        // b = (sin x2, sin x1): det(I + ε∇b) = 1 - ε² cos x1 cos x2 ≤ 1 + ε²κ²
        // with κ = 1, so E det J_T ≤ e^{κ² ε T}.
        let c = CoefficientSet::new(2)
            .with_drift(|_, x, out| {
                out[0] = x[1].sin();
                out[1] = x[0].sin();
            })
            .with_drift_jacobian(|_, x, out| {
                out.copy_from_slice(&[0.0, x[1].cos(), x[0].cos(), 0.0]);
            });
        let (eps, t) = (0.1, 2.0);
        let reps = 1000;
        let mean = (0..reps)
            .map(|r| {
                let path = simulate_path(&c, &[0.3, -0.2], eps, t, &stream(13, r)).unwrap();
                *path_jacobian(&path, &c).unwrap().determinants.last().unwrap()
            })
            .sum::<f64>()
            / reps as f64;
        assert!(mean <= (eps * t).exp(), "mean det {mean}");
    }

    #[test]
    fn tamed_jacobian_matches_finite_differences() {
        let c = CoefficientSet::new(2)
            .with_drift(|_, x, out| {
                out[0] = x[0] - x[0].powi(3) + x[1];
                out[1] = -x[1].powi(3);
            })
            .with_drift_jacobian(|_, x, out| {
                out.copy_from_slice(&[1.0 - 3.0 * x[0] * x[0], 1.0, 0.0, -3.0 * x[1] * x[1]]);
            })
            .with_growth_exponent(3.0);
        let eps = 0.04;
        let x = [1.3, -0.7];
        let mut jac = [0.0; 4];
        tamed_jacobian(&c, eps, 0.0, &x, &mut jac).unwrap();
        let bt = |y: &[f64]| {
            let mut b = [0.0; 2];
            let mut o = [0.0; 2];
            c.drift(0.0, y, &mut b);
            tame_drift(&b, 3.0, eps, true, &mut o).unwrap();
            o
        };
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let (p, m) = (bt(&xp), bt(&xm));
            for i in 0..2 {
                let fd = (p[i] - m[i]) / (2.0 * h);
                assert!((fd - jac[i * 2 + k]).abs() < 1e-7, "i={i} k={k}");
            }
        }
    }

    #[test]
    fn path_csv_header() {
        let c = CoefficientSet::new(2).with_additive_noise(axis(2));
        let path = simulate_path(&c, &[0.0, 1.0], 0.5, 1.0, &stream(14, 0)).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,S_n,state_1,state_2");
        assert_eq!(lines.next().unwrap(), "0,0,0,1");
        assert_eq!(text.lines().count(), path.event_count() + 2);
    }
}
