//! Interacting particle systems driven by `N` independent compound-Poisson
//! clocks of intensity `N`.
//!
//! At a tick of particle `i` at time `s` with jump `ξ`:
//! `x_i += σ_N[s, x_i, μ^N_{s-}, ξ] + b_N[s, x_i, μ^N_{s-}]`, where brackets are
//! averages over all `N` current states and
//! `b_N = b / (N + √N |b|^{1-1/m})`, `σ_N = σ(N^{-1/α} z)` (`N^{-1/2} σ(z)` for
//! `α = 2`).
//!
//! Particles are processed in the canonical order of their stream labels,
//! so permuting initial states and labels together permutes the output
//! exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, Write};
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::randomness::{JumpLaw, Label, RngStream};
use crate::scheme::{clock_stream, jump_stream, DIVERGENCE_THRESHOLD};
use crate::stats::{mean_ci, Estimate};

/// `b(t, x, y)` written into `out`.
pub type PairDriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `σ(t, x, y, z)` written into `out`; odd in `z`.
pub type PairDiffusionFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Limit bracket `b[t, x, μ_t]` written into `out`.
pub type BracketFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

pub const PICARD_TOLERANCE: f64 = 1e-8;
pub const PICARD_MAX_SWEEPS: usize = 50;
/// Sweeps over which the Picard gap must shrink.
pub const PICARD_WINDOW: usize = 10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum McKeanError {
    #[error("particle {particle} diverged at t = {time}")]
    Divergence { particle: usize, time: f64 },
    #[error("measure-flow Picard iteration failed to contract; gaps {gaps:?}")]
    PicardStalled { gaps: Vec<f64> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel does not support {0}")]
    Unsupported(&'static str),
}

/// Separable term `g(x) h(y)` of a pair drift `b(x, y) = Σ_r g_r(x) h_r(y)`.
#[derive(Clone)]
pub struct Feature {
    pub coefficient: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub weight: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl Feature {
    pub fn new<G, H>(coefficient: G, weight: H) -> Self
    where
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            coefficient: Arc::new(coefficient),
            weight: Arc::new(weight),
        }
    }
}

#[derive(Clone)]
pub enum PairNoise {
    None,
    /// `σ(t, x, y, z) = z`.
    Additive(Arc<JumpLaw>),
    Pair(PairDiffusionFn, Arc<JumpLaw>),
}

impl PairNoise {
    fn law(&self) -> Option<&Arc<JumpLaw>> {
        match self {
            PairNoise::None => None,
            PairNoise::Additive(l) | PairNoise::Pair(_, l) => Some(l),
        }
    }
}

/// Pair coefficients of a particle system.
#[derive(Clone)]
pub struct KernelSet {
    dim: usize,
    drift: PairDriftFn,
    noise: PairNoise,
    growth_exponent: f64,
    taming: bool,
    features: Vec<Feature>,
    closed_limit: Option<BracketFn>,
}

impl std::fmt::Debug for KernelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSet")
            .field("dim", &self.dim)
            .field("growth_exponent", &self.growth_exponent)
            .field("taming", &self.taming)
            .field("features", &self.features.len())
            .field("closed_limit", &self.closed_limit.is_some())
            .finish()
    }
}

impl KernelSet {
    /// Drift-only kernel with `m = 1`.
    pub fn new<F>(dim: usize, drift: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            drift: Arc::new(drift),
            noise: PairNoise::None,
            growth_exponent: 1.0,
            taming: false,
            features: Vec::new(),
            closed_limit: None,
        }
    }

    pub fn with_additive_noise(mut self, law: Arc<JumpLaw>) -> Self {
        assert_eq!(law.dim(), self.dim, "jump law dimension mismatch");
        self.noise = PairNoise::Additive(law);
        self
    }

    pub fn with_pair_noise<F>(mut self, sigma: F, law: Arc<JumpLaw>) -> Self
    where
        F: Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert_eq!(law.dim(), self.dim, "jump law dimension mismatch");
        self.noise = PairNoise::Pair(Arc::new(sigma), law);
        self
    }

    pub fn with_growth_exponent(mut self, m: f64) -> Self {
        assert!(m >= 1.0, "growth exponent must be at least 1");
        self.growth_exponent = m;
        self.taming = m > 1.0;
        self
    }

    pub fn with_taming(mut self, taming: bool) -> Self {
        self.taming = taming;
        self
    }

    /// Declare `b(t, x, y) = Σ_r g_r(x) h_r(y)`; must agree with the drift.
    pub fn with_features(mut self, features: Vec<Feature>) -> Self {
        self.features = features;
        self
    }

    /// Closed-form limit bracket `b[t, x, μ_t]` for the scenario's initial law.
    pub fn with_closed_limit<F>(mut self, bracket: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.closed_limit = Some(Arc::new(bracket));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise(&self) -> &PairNoise {
        &self.noise
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn has_noise(&self) -> bool {
        !matches!(self.noise, PairNoise::None)
    }

    pub fn drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, y, out)
    }

    fn alpha(&self) -> f64 {
        self.noise.law().map_or(2.0, |l| l.alpha())
    }
}

/// Law of the i.i.d. initial states.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent `N(mean, sd²)` coordinates.
    Normal { dim: usize, mean: f64, sd: f64 },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Normal { dim, .. } => *dim,
        }
    }

    pub fn sample_into(&self, stream: &mut RngStream, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::Normal { mean, sd, .. } => {
                for v in out.iter_mut() {
                    *v = mean + sd * stream.normal();
                }
            }
        }
    }

    /// `k` points representing the law: mid-quantiles in 1-D, a sample from
    /// `stream` otherwise.
    pub fn cloud(&self, k: usize, stream: &RngStream) -> Vec<f64> {
        let d = self.dim();
        match self {
            InitialLaw::Point(x) => x.repeat(k),
            InitialLaw::Normal { mean, sd, .. } if d == 1 => {
                let n = Normal::new(*mean, *sd).expect("valid normal law");
                (0..k).map(|j| n.inverse_cdf((j as f64 + 0.5) / k as f64)).collect()
            }
            InitialLaw::Normal { .. } => {
                let mut s = stream.child(Label::purpose("cloud"));
                let mut out = vec![0.0; k * d];
                for chunk in out.chunks_exact_mut(d) {
                    self.sample_into(&mut s, chunk);
                }
                out
            }
        }
    }
}

/// Stream of particle `label` inside a replica stream.
pub fn particle_stream(replica: &RngStream, label: u64) -> RngStream {
    replica.child(Label::particle(label))
}

/// i.i.d. initial states for labels `0..n`, each drawn from its own stream.
pub fn sample_initial(law: &InitialLaw, n: usize, replica: &RngStream) -> Vec<f64> {
    let d = law.dim();
    let mut out = vec![0.0; n * d];
    for (i, chunk) in out.chunks_exact_mut(d).enumerate() {
        let mut s = particle_stream(replica, i as u64).child(Label::purpose("init"));
        law.sample_into(&mut s, chunk);
    }
    out
}

/// Limit measure flow `μ_t`, exposed through the bracket `b[t, x, μ_t]`.
#[derive(Clone)]
pub struct LimitFlow {
    dim: usize,
    horizon: f64,
    kind: FlowKind,
    sweeps: usize,
    gaps: Vec<f64>,
    /// Cloud at the horizon, `k × dim`.
    terminal_cloud: Vec<f64>,
}

#[derive(Clone)]
enum FlowKind {
    Closed(BracketFn),
    Features {
        features: Vec<Feature>,
        /// Feature means on the grid `j · step`, `j = 0..=2·steps`.
        means: Vec<Vec<f64>>,
        step: f64,
    },
}

impl std::fmt::Debug for LimitFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LimitFlow")
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("sweeps", &self.sweeps)
            .field("gaps", &self.gaps)
            .finish()
    }
}

/// Options of the Picard construction of the limit flow.
#[derive(Debug, Clone)]
pub struct PicardOptions {
    /// Cloud size `K`.
    pub cloud: usize,
    /// RK4 steps on `[0, horizon]` (drift-only kernels).
    pub steps: usize,
    /// Scheme step of the noisy cloud.
    pub noisy_eps: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl PicardOptions {
    /// `K = 16 N`.
    pub fn for_particles(n: usize) -> Self {
        Self {
            cloud: 16 * n.max(1),
            steps: 200,
            noisy_eps: 1e-3,
            tolerance: PICARD_TOLERANCE,
            max_sweeps: PICARD_MAX_SWEEPS,
        }
    }
}

fn feature_means_at(features: &[Feature], cloud: &[f64], d: usize, out: &mut [f64]) {
    let k = cloud.len() / d;
    for (r, f) in features.iter().enumerate() {
        out[r] = cloud.chunks_exact(d).map(|y| (f.weight)(y)).sum::<f64>() / k as f64;
    }
}

fn apply_features(features: &[Feature], x: &[f64], means: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let mut g = vec![0.0; out.len()];
    for (f, m) in features.iter().zip(means) {
        (f.coefficient)(x, &mut g);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += gi * m;
        }
    }
}

impl LimitFlow {
    /// Flow given by a closed-form bracket.
    pub fn closed(dim: usize, horizon: f64, bracket: BracketFn) -> Self {
        Self {
            dim,
            horizon,
            kind: FlowKind::Closed(bracket),
            sweeps: 0,
            gaps: Vec::new(),
            terminal_cloud: Vec::new(),
        }
    }

    /// The kernel's closed form if it has one, otherwise Picard iteration on
    /// a cloud of `options.cloud` points.
    pub fn build(
        kernel: &KernelSet,
        law: &InitialLaw,
        horizon: f64,
        options: &PicardOptions,
        stream: &RngStream,
    ) -> Result<Self, McKeanError> {
        if let Some(b) = &kernel.closed_limit {
            return Ok(Self::closed(kernel.dim, horizon, b.clone()));
        }
        Self::picard(kernel, law, horizon, options, stream)
    }

    /// Picard iteration on the feature means `m_r(t) = ∫ h_r dμ_t`.
    ///
    /// Drift-only kernels move the cloud by RK4; noisy kernels move it by the
    /// compound-Poisson scheme with common random numbers across sweeps.
    pub fn picard(
        kernel: &KernelSet,
        law: &InitialLaw,
        horizon: f64,
        options: &PicardOptions,
        stream: &RngStream,
    ) -> Result<Self, McKeanError> {
        if kernel.features.is_empty() {
            return Err(McKeanError::Unsupported("a limit flow without separable features"));
        }
        if matches!(kernel.noise, PairNoise::Pair(..)) {
            return Err(McKeanError::Unsupported("a limit flow with pair-dependent noise"));
        }
        let d = kernel.dim;
        let k = options.cloud.max(1);
        let steps = options.steps.max(1);
        let step = horizon / (2 * steps) as f64;
        let nr = kernel.features.len();
        let cloud0 = law.cloud(k, stream);
        let mut m0 = vec![0.0; nr];
        feature_means_at(&kernel.features, &cloud0, d, &mut m0);
        let mut means = vec![m0; 2 * steps + 1];
        let mut gaps = Vec::new();
        for sweep in 1..=options.max_sweeps {
            let (new_means, end) = if kernel.has_noise() {
                noisy_sweep(kernel, &cloud0, &means, step, horizon, options.noisy_eps, stream)?
            } else {
                rk4_sweep(kernel, &cloud0, &means, step, steps)
            };
            let gap = means
                .iter()
                .zip(&new_means)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            gaps.push(gap);
            means = new_means;
            if gap < options.tolerance {
                return Ok(Self {
                    dim: d,
                    horizon,
                    kind: FlowKind::Features {
                        features: kernel.features.clone(),
                        means,
                        step,
                    },
                    sweeps: sweep,
                    gaps,
                    terminal_cloud: end,
                });
            }
            if gaps.len() > PICARD_WINDOW && gap >= gaps[gaps.len() - 1 - PICARD_WINDOW] {
                return Err(McKeanError::PicardStalled { gaps });
            }
        }
        Err(McKeanError::PicardStalled { gaps })
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// Cloud representing `μ_T` (empty for closed-form flows).
    pub fn terminal_cloud(&self) -> &[f64] {
        &self.terminal_cloud
    }

    /// `b[t, x, μ_t]`.
    pub fn bracket(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FlowKind::Closed(b) => b(t, x, out),
            FlowKind::Features {
                features,
                means,
                step,
            } => {
                let m = interpolate_means(means, *step, t);
                apply_features(features, x, &m, out);
            }
        }
    }
}

fn interpolate_means(means: &[Vec<f64>], step: f64, t: f64) -> Vec<f64> {
    let last = means.len() - 1;
    let pos = (t / step).clamp(0.0, last as f64);
    let j = (pos.floor() as usize).min(last.saturating_sub(1));
    let w = pos - j as f64;
    if last == 0 {
        return means[0].clone();
    }
    means[j]
        .iter()
        .zip(&means[j + 1])
        .map(|(a, b)| a + w * (b - a))
        .collect()
}

/// Move every cloud point by RK4 under the frozen means; record new means
/// at all half-step nodes.
fn rk4_sweep(
    kernel: &KernelSet,
    cloud0: &[f64],
    means: &[Vec<f64>],
    step: f64,
    steps: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = kernel.dim;
    let nr = kernel.features.len();
    let k = cloud0.len() / d;
    let h = 2.0 * step;
    let mut sums = vec![vec![0.0; nr]; 2 * steps + 1];
    let mut end = cloud0.to_vec();
    let f = |j: usize, x: &[f64], out: &mut [f64]| apply_features(&kernel.features, x, &means[j], out);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let mut mid = vec![0.0; d];
    for p in 0..k {
        let x = &mut end[p * d..(p + 1) * d];
        for (r, feat) in kernel.features.iter().enumerate() {
            sums[0][r] += (feat.weight)(x);
        }
        for n in 0..steps {
            let j = 2 * n;
            f(j, x, &mut k1);
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            f(j + 1, &tmp, &mut k2);
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            f(j + 1, &tmp, &mut k3);
            for i in 0..d {
                tmp[i] = x[i] + h * k3[i];
            }
            f(j + 2, &tmp, &mut k4);
            let x_old = x.to_vec();
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            // Cubic Hermite midpoint from the end slopes.
            f(j + 2, x, &mut k4);
            for i in 0..d {
                mid[i] = 0.5 * (x_old[i] + x[i]) + h / 8.0 * (k1[i] - k4[i]);
            }
            for (r, feat) in kernel.features.iter().enumerate() {
                sums[j + 1][r] += (feat.weight)(&mid);
                sums[j + 2][r] += (feat.weight)(x);
            }
        }
    }
    for s in &mut sums {
        for v in s.iter_mut() {
            *v /= k as f64;
        }
    }
    (sums, end)
}

/// Noisy cloud: each point follows the scheme at step `eps` with its own
/// fixed stream, drift bracket from the frozen means.
fn noisy_sweep(
    kernel: &KernelSet,
    cloud0: &[f64],
    means: &[Vec<f64>],
    step: f64,
    horizon: f64,
    eps: f64,
    stream: &RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), McKeanError> {
    let d = kernel.dim;
    let nr = kernel.features.len();
    let k = cloud0.len() / d;
    let law = kernel.noise.law().expect("noisy kernel has a law").clone();
    let alpha = law.alpha();
    let scale = if alpha >= 2.0 { eps.sqrt() } else { eps.powf(1.0 / alpha) };
    let nodes = means.len();
    let mut sums = vec![vec![0.0; nr]; nodes];
    let mut end = cloud0.to_vec();
    let mut b = vec![0.0; d];
    let mut z = vec![0.0; d];
    let base = stream.child(Label::purpose("noisy_cloud"));
    for p in 0..k {
        let ps = base.child(Label::particle(p as u64));
        let mut clock = clock_stream(&ps);
        let mut jumps = jump_stream(&ps);
        let x = &mut end[p * d..(p + 1) * d];
        let mut next_node = 0usize;
        let mut t = 0.0;
        loop {
            let t_next = t + eps * clock.exponential();
            // Record nodes in [t, t_next) with the current state.
            while next_node < nodes && (next_node as f64 * step) < t_next.min(horizon + step * 0.5) {
                for (r, feat) in kernel.features.iter().enumerate() {
                    sums[next_node][r] += (feat.weight)(x);
                }
                next_node += 1;
            }
            if t_next > horizon {
                break;
            }
            t = t_next;
            let m = interpolate_means(means, step, t);
            apply_features(&kernel.features, x, &m, &mut b);
            law.sample_into(&mut jumps, &mut z);
            for i in 0..d {
                x[i] += eps * b[i] + scale * z[i];
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(McKeanError::Divergence { particle: p, time: t });
            }
        }
        while next_node < nodes {
            for (r, feat) in kernel.features.iter().enumerate() {
                sums[next_node][r] += (feat.weight)(x);
            }
            next_node += 1;
        }
    }
    for s in &mut sums {
        for v in s.iter_mut() {
            *v /= k as f64;
        }
    }
    Ok((sums, end))
}

/// What to compute alongside the particle trajectories.
#[derive(Clone, Default)]
pub struct ParticleOptions {
    /// Coupled copies driven by the same clocks and jumps, bracketed
    /// against this flow.
    pub coupled: Option<Arc<LimitFlow>>,
    /// Keep the full event log.
    pub record_events: bool,
    /// Always use the `O(N)` pair sum, even when features are declared.
    pub naive: bool,
    /// Accumulate the fluctuation statistic (1-D, drift-only).
    pub fluctuation: bool,
}

/// One row of the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    /// Position of the particle in the caller's ordering.
    pub particle: usize,
    pub state: Vec<f64>,
}

/// Output of one particle-system run, indexed in the caller's order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRun {
    pub n: usize,
    pub dim: usize,
    pub horizon: f64,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    pub event_counts: Vec<u64>,
    pub events: Option<Vec<EventRecord>>,
    pub coupled_terminal: Option<Vec<f64>>,
    /// `sup_t |X^{N,i}_t − X̄^i_t|²` per particle.
    pub coupling_sup_sq: Option<Vec<f64>>,
    /// `Σ_i (X^i_T − X^i_0) − ∫_0^T Σ_i b[s, X^i_s, μ^N_s] ds`.
    pub fluctuation: Option<f64>,
}

impl ParticleRun {
    pub fn total_events(&self) -> u64 {
        self.event_counts.iter().sum()
    }

    /// CSV `event_idx,time,particle,state_1,…`; requires a recorded log.
    pub fn write_events_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "event_idx,time,particle")?;
        for k in 1..=self.dim {
            write!(w, ",state_{k}")?;
        }
        writeln!(w)?;
        for (idx, e) in self.events.iter().flatten().enumerate() {
            write!(w, "{idx},{},{}", e.time, e.particle)?;
            for v in &e.state {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(PartialEq)]
struct Tick {
    time: f64,
    slot: usize,
}

impl Eq for Tick {}

impl Ord for Tick {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, slot).
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for Tick {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn tamed_factor(eps: f64, b: &[f64], m: f64, taming: bool) -> f64 {
    if taming {
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        eps / (1.0 + eps.sqrt() * nb.powf(1.0 - 1.0 / m))
    } else {
        eps
    }
}

/// Simulate the `N = init.len() / dim` particle system on `[0, horizon]`.
///
/// Particle `p` starts at `init[p]` and draws its clock and jumps from the
/// stream of `labels[p]` under `replica`.
pub fn simulate_particles(
    kernel: &KernelSet,
    init: &[f64],
    labels: &[u64],
    horizon: f64,
    replica: &RngStream,
    options: &ParticleOptions,
) -> Result<ParticleRun, McKeanError> {
    let d = kernel.dim;
    if init.is_empty() || init.len() % d != 0 {
        return Err(McKeanError::InvalidParameter(format!(
            "initial states must hold N ≥ 1 vectors of dimension {d}"
        )));
    }
    let n = init.len() / d;
    if labels.len() != n {
        return Err(McKeanError::InvalidParameter("one label per particle required".into()));
    }
    if !(horizon > 0.0) {
        return Err(McKeanError::InvalidParameter(format!("horizon {horizon} must be positive")));
    }
    if options.coupled.is_some() && matches!(kernel.noise, PairNoise::Pair(..)) {
        return Err(McKeanError::Unsupported("coupling with pair-dependent noise"));
    }
    if options.fluctuation && (d != 1 || kernel.has_noise()) {
        return Err(McKeanError::Unsupported("fluctuation statistics outside 1-D drift-only systems"));
    }

    // Canonical order: slot c holds the particle with the c-th smallest label.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&p| labels[p]);
    if order.windows(2).any(|w| labels[w[0]] == labels[w[1]]) {
        return Err(McKeanError::InvalidParameter("particle labels must be distinct".into()));
    }

    let nf = n as f64;
    let eps = 1.0 / nf;
    let alpha = kernel.alpha();
    let jump_scale = if alpha >= 2.0 { eps.sqrt() } else { eps.powf(1.0 / alpha) };
    let use_features = !kernel.features.is_empty() && !kernel.taming && !options.naive;
    let nr = kernel.features.len();

    let mut x = vec![0.0; n * d];
    for (c, &p) in order.iter().enumerate() {
        x[c * d..(c + 1) * d].copy_from_slice(&init[p * d..(p + 1) * d]);
    }
    let x0 = x.clone();
    let mut clocks = Vec::with_capacity(n);
    let mut jumps = Vec::with_capacity(n);
    let mut heap = BinaryHeap::with_capacity(n);
    for (c, &p) in order.iter().enumerate() {
        let ps = particle_stream(replica, labels[p]);
        let mut clock = clock_stream(&ps);
        let t = eps * clock.exponential();
        clocks.push(clock);
        jumps.push(jump_stream(&ps));
        if t <= horizon {
            heap.push(Tick { time: t, slot: c });
        }
    }

    // Feature caches: h_r(x_j) and their sums; g_r(x_j) sums for the
    // fluctuation compensator.
    let mut hcache = vec![0.0; if use_features { n * nr } else { 0 }];
    let mut hsum = vec![0.0; nr];
    let mut gsum = vec![0.0; nr];
    let mut gbuf = vec![0.0; d];
    if use_features {
        for c in 0..n {
            let xc = &x[c * d..(c + 1) * d];
            for (r, f) in kernel.features.iter().enumerate() {
                let h = (f.weight)(xc);
                hcache[c * nr + r] = h;
                hsum[r] += h;
                if options.fluctuation {
                    (f.coefficient)(xc, &mut gbuf);
                    gsum[r] += gbuf[0];
                }
            }
        }
    }

    let mut counts = vec![0u64; n];
    let mut events = options.record_events.then(Vec::new);
    let mut coupled = options.coupled.as_ref().map(|_| x0.clone());
    let mut sup_sq = options.coupled.as_ref().map(|_| vec![0.0f64; n]);

    // Fluctuation: P(s) = Σ_i b[s, x_i, μ^N_s] (raw b), integrated exactly.
    let mut pair_total = 0.0;
    let mut compensator = 0.0;
    let mut jump_total = 0.0;
    let mut last_t = 0.0;
    let mut bij = vec![0.0; d];
    if options.fluctuation {
        pair_total = if use_features {
            (0..nr).map(|r| gsum[r] * hsum[r]).sum::<f64>() / nf
        } else {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    kernel.drift(0.0, &x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d], &mut bij);
                    s += bij[0];
                }
            }
            s / nf
        };
    }

    let mut drift = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut zs = vec![0.0; d];
    let mut sig = vec![0.0; d];
    let mut lim = vec![0.0; d];
    let law = kernel.noise.law().cloned();

    while let Some(Tick { time: t, slot: c }) = heap.pop() {
        let xc: Vec<f64> = x[c * d..(c + 1) * d].to_vec();
        // Drift bracket against μ^N_{t-}.
        drift.fill(0.0);
        if use_features {
            let mut g = vec![0.0; d];
            for (r, f) in kernel.features.iter().enumerate() {
                (f.coefficient)(&xc, &mut g);
                let m = hsum[r] / nf;
                for i in 0..d {
                    drift[i] += g[i] * m;
                }
            }
            for v in drift.iter_mut() {
                *v *= eps;
            }
        } else {
            for j in 0..n {
                kernel.drift(t, &xc, &x[j * d..(j + 1) * d], &mut bij);
                let f = tamed_factor(eps, &bij, kernel.growth_exponent, kernel.taming);
                for i in 0..d {
                    drift[i] += f * bij[i];
                }
            }
            for v in drift.iter_mut() {
                *v /= nf;
            }
        }
        // Jump bracket.
        noise.fill(0.0);
        if let Some(law) = &law {
            law.sample_into(&mut jumps[c], &mut z);
            match &kernel.noise {
                PairNoise::Additive(_) => {
                    for i in 0..d {
                        noise[i] = jump_scale * z[i];
                    }
                }
                PairNoise::Pair(sigma, _) => {
                    if alpha < 2.0 {
                        for i in 0..d {
                            zs[i] = jump_scale * z[i];
                        }
                    } else {
                        zs.copy_from_slice(&z);
                    }
                    for j in 0..n {
                        sigma(t, &xc, &x[j * d..(j + 1) * d], &zs, &mut sig);
                        for i in 0..d {
                            noise[i] += sig[i];
                        }
                    }
                    let post = if alpha < 2.0 { 1.0 / nf } else { jump_scale / nf };
                    for v in noise.iter_mut() {
                        *v *= post;
                    }
                }
                PairNoise::None => {}
            }
        }

        if options.fluctuation {
            compensator += pair_total * (t - last_t);
            last_t = t;
            jump_total += drift[0];
        }

        let mut xn = xc.clone();
        for i in 0..d {
            xn[i] += noise[i] + drift[i];
        }
        let norm = xn.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
            return Err(McKeanError::Divergence {
                particle: order[c],
                time: t,
            });
        }

        if options.fluctuation {
            // Update Σ_i b[x_i, μ^N] for the move x_c: xc → xn.
            if use_features {
                for (r, f) in kernel.features.iter().enumerate() {
                    (f.coefficient)(&xc, &mut gbuf);
                    let g_old = gbuf[0];
                    (f.coefficient)(&xn, &mut gbuf);
                    gsum[r] += gbuf[0] - g_old;
                }
            } else {
                let mut delta = 0.0;
                for j in 0..n {
                    if j == c {
                        continue;
                    }
                    let xj = &x[j * d..(j + 1) * d];
                    kernel.drift(t, &xn, xj, &mut bij);
                    delta += bij[0];
                    kernel.drift(t, &xc, xj, &mut bij);
                    delta -= bij[0];
                    kernel.drift(t, xj, &xn, &mut bij);
                    delta += bij[0];
                    kernel.drift(t, xj, &xc, &mut bij);
                    delta -= bij[0];
                }
                kernel.drift(t, &xn, &xn, &mut bij);
                delta += bij[0];
                kernel.drift(t, &xc, &xc, &mut bij);
                delta -= bij[0];
                pair_total += delta / nf;
            }
        }
        x[c * d..(c + 1) * d].copy_from_slice(&xn);
        if use_features {
            for (r, f) in kernel.features.iter().enumerate() {
                let h = (f.weight)(&xn);
                hsum[r] += h - hcache[c * nr + r];
                hcache[c * nr + r] = h;
            }
            if options.fluctuation {
                pair_total = (0..nr).map(|r| gsum[r] * hsum[r]).sum::<f64>() / nf;
            }
        }
        counts[c] += 1;

        if let (Some(flow), Some(y), Some(sup)) = (&options.coupled, coupled.as_mut(), sup_sq.as_mut()) {
            let yc = &mut y[c * d..(c + 1) * d];
            flow.bracket(t, yc, &mut lim);
            let f = tamed_factor(eps, &lim, kernel.growth_exponent, kernel.taming);
            let mut gap = 0.0;
            for i in 0..d {
                yc[i] += noise[i] + f * lim[i];
                gap += (x[c * d + i] - yc[i]).powi(2);
            }
            sup[c] = sup[c].max(gap);
        }

        if let Some(ev) = events.as_mut() {
            ev.push(EventRecord {
                time: t,
                particle: order[c],
                state: xn,
            });
        }

        let t_next = t + eps * clocks[c].exponential();
        if t_next <= horizon {
            heap.push(Tick { time: t_next, slot: c });
        }
    }

    if options.fluctuation {
        compensator += pair_total * (horizon - last_t);
    }

    // Back to the caller's order.
    let unpermute = |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for (c, &p) in order.iter().enumerate() {
            out[p * d..(p + 1) * d].copy_from_slice(&v[c * d..(c + 1) * d]);
        }
        out
    };
    let mut event_counts = vec![0u64; n];
    for (c, &p) in order.iter().enumerate() {
        event_counts[p] = counts[c];
    }
    let coupling_sup_sq = sup_sq.map(|s| {
        let mut out = vec![0.0; n];
        for (c, &p) in order.iter().enumerate() {
            out[p] = s[c];
        }
        out
    });
    Ok(ParticleRun {
        n,
        dim: d,
        horizon,
        initial: unpermute(&x0),
        terminal: unpermute(&x),
        event_counts,
        events,
        coupled_terminal: coupled.as_deref().map(unpermute),
        coupling_sup_sq,
        fluctuation: options.fluctuation.then(|| jump_total - compensator),
    })
}

/// Run one replica with labels `0..n` and initial states from `law`.
pub fn simulate_replica(
    kernel: &KernelSet,
    law: &InitialLaw,
    n: usize,
    horizon: f64,
    replica: &RngStream,
    options: &ParticleOptions,
) -> Result<ParticleRun, McKeanError> {
    let init = sample_initial(law, n, replica);
    let labels: Vec<u64> = (0..n as u64).collect();
    simulate_particles(kernel, &init, &labels, horizon, replica, options)
}

/// Coupled run: particles plus their copies bracketed against `flow`.
pub fn simulate_coupled(
    kernel: &KernelSet,
    law: &InitialLaw,
    n: usize,
    horizon: f64,
    replica: &RngStream,
    flow: Arc<LimitFlow>,
) -> Result<ParticleRun, McKeanError> {
    let options = ParticleOptions {
        coupled: Some(flow),
        ..ParticleOptions::default()
    };
    simulate_replica(kernel, law, n, horizon, replica, &options)
}

/// `sup_i E sup_t |X^{N,i}_t − X̄^i_t|²` over replicas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaosError {
    /// Mean over particles and replicas; estimates the common value of
    /// `E sup_t |gap|²` for exchangeable particles.
    pub pooled: Estimate,
    /// Largest per-particle replica mean.
    pub max_particle: f64,
}

pub fn chaos_error(runs: &[ParticleRun]) -> ChaosError {
    let n = runs.first().map_or(0, |r| r.n);
    // Per-replica particle average keeps replicas as the independent unit.
    let per_replica: Vec<f64> = runs
        .iter()
        .map(|r| {
            let s = r.coupling_sup_sq.as_ref().expect("coupled run");
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect();
    let mut per_particle = vec![0.0; n];
    for r in runs {
        for (acc, v) in per_particle.iter_mut().zip(r.coupling_sup_sq.as_ref().unwrap()) {
            *acc += v / runs.len() as f64;
        }
    }
    ChaosError {
        pooled: mean_ci(&per_replica),
        max_particle: per_particle.iter().copied().fold(0.0, f64::max),
    }
}

/// `∫_0^T ∫ |b[s, x, μ_s]|² μ_s(dx) ds` along a drift-only limit flow,
/// by the trapezoid rule with the cloud moved by RK4.
pub fn limit_bracket_energy(
    flow: &LimitFlow,
    law: &InitialLaw,
    cloud: usize,
    steps: usize,
    stream: &RngStream,
) -> f64 {
    let d = flow.dim;
    let mut pts = law.cloud(cloud, stream);
    let h = flow.horizon / steps as f64;
    let k = pts.len() / d;
    let mut b = vec![0.0; d];
    let energy = |t: f64, pts: &[f64], b: &mut [f64]| {
        pts.chunks_exact(d)
            .map(|x| {
                flow.bracket(t, x, b);
                b.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            / k as f64
    };
    let mut acc = 0.5 * energy(0.0, &pts, &mut b);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for s in 0..steps {
        let t = s as f64 * h;
        for x in pts.chunks_exact_mut(d) {
            flow.bracket(t, x, &mut k1);
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            flow.bracket(t + 0.5 * h, &tmp, &mut k2);
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            flow.bracket(t + 0.5 * h, &tmp, &mut k3);
            for i in 0..d {
                tmp[i] = x[i] + h * k3[i];
            }
            flow.bracket(t + h, &tmp, &mut k4);
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let w = if s + 1 == steps { 0.5 } else { 1.0 };
        acc += w * energy(t + h, &pts, &mut b);
    }
    acc * h
}

/// Replica variance of the fluctuation statistic.
pub fn fluctuation_variance(runs: &[ParticleRun]) -> Estimate {
    let ys: Vec<f64> = runs
        .iter()
        .map(|r| r.fluctuation.expect("fluctuation enabled"))
        .collect();
    crate::stats::variance_ci(&ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::{build_jump_law, derive_stream};
    use crate::scheme::{simulate_path, CoefficientSet};

    fn replica(seed: u64, r: u64) -> RngStream {
        derive_stream(seed, &[Label::replica(r)]).unwrap()
    }

    fn sin_kernel() -> KernelSet {
        KernelSet::new(1, |_, x, y, out| out[0] = (x[0] - y[0]).sin()).with_features(vec![
            Feature::new(|x, g| g[0] = x[0].sin(), |y| y[0].cos()),
            Feature::new(|x, g| g[0] = -x[0].cos(), |y| y[0].sin()),
        ])
    }

    fn std_normal() -> InitialLaw {
        InitialLaw::Normal {
            dim: 1,
            mean: 0.0,
            sd: 1.0,
        }
    }

    #[test]
    fn single_particle_matches_scheme() {
        let law = Arc::new(build_jump_law(2.0, 1, None).unwrap());
        let kernel = KernelSet::new(1, |t, x, y, out| out[0] = (x[0] + y[0]).sin() - 0.3 * x[0] + t)
            .with_additive_noise(law.clone());
        let coeffs = CoefficientSet::new(1)
            .with_drift(|t, x, out| out[0] = (2.0 * x[0]).sin() - 0.3 * x[0] + t)
            .with_additive_noise(law);
        let rep = replica(1, 0);
        let run = simulate_particles(
            &kernel,
            &[0.4],
            &[0],
            5.0,
            &rep,
            &ParticleOptions {
                record_events: true,
                ..Default::default()
            },
        )
        .unwrap();
        let path = simulate_path(&coeffs, &[0.4], 1.0, 5.0, &particle_stream(&rep, 0)).unwrap();
        assert_eq!(run.terminal, path.terminal());
        assert_eq!(run.total_events() as usize, path.event_count());
        for (k, e) in run.events.as_ref().unwrap().iter().enumerate() {
            assert_eq!(e.time, path.times()[k + 1]);
            assert_eq!(e.state.as_slice(), path.state(k + 1));
        }
    }

    #[test]
    fn constant_kernel_mean_displacement() {
        let kernel = KernelSet::new(1, |_, _, _, out| out[0] = 2.0);
        let (n, t) = (16, 1.5);
        let reps = 200;
        let disp: Vec<f64> = (0..reps)
            .flat_map(|r| {
                let run = simulate_replica(&kernel, &InitialLaw::Point(vec![0.0]), n, t, &replica(2, r), &ParticleOptions::default()).unwrap();
                // Each particle moves by 2/N per own tick.
                for (x, &c) in run.terminal.iter().zip(&run.event_counts) {
                    assert!((x - 2.0 * c as f64 / n as f64).abs() < 1e-12);
                }
                run.terminal
            })
            .collect();
        let m = mean_ci(&disp);
        assert!((m.value - 2.0 * t).abs() < 2.0 * m.ci, "{m:?}");
    }

    #[test]
    fn mean_reverting_variance_matches_ou() {
        // b[x, μ] = −(x − mean μ): each particle is an OU process around the
        // (conserved in expectation) ensemble mean. With N(0,1) start and unit
        // noise, Var X_t = e^{-2t} + (1 − e^{-2t})/2 in the limit.
        let law = Arc::new(build_jump_law(2.0, 1, None).unwrap());
        let kernel = KernelSet::new(1, |_, x, y, out| out[0] = -(x[0] - y[0])).with_additive_noise(law);
        let n = 64;
        let reps = 100;
        let mut vals = Vec::new();
        for r in 0..reps {
            let run = simulate_replica(&kernel, &std_normal(), n, 1.0, &replica(3, r), &ParticleOptions::default()).unwrap();
            vals.extend(run.terminal);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let exact = (-2.0f64).exp() + (1.0 - (-2.0f64).exp()) / 2.0;
        // Replicas are the independent unit; particles within one are weakly
        // correlated through the mean, so allow a generous CI.
        assert!((var - exact).abs() < 0.05, "var {var} exact {exact}");
    }

    #[test]
    fn exchangeability() {
        let law = Arc::new(build_jump_law(2.0, 1, None).unwrap());
        let kernel = KernelSet::new(1, |_, x, y, out| out[0] = (x[0] - y[0]).sin() + 0.1 * y[0]).with_additive_noise(law);
        let rep = replica(4, 0);
        let init = [0.3, -1.0, 2.0, 0.7, -0.2];
        let labels = [0u64, 1, 2, 3, 4];
        let perm = [3usize, 0, 4, 1, 2];
        let a = simulate_particles(&kernel, &init, &labels, 2.0, &rep, &ParticleOptions::default()).unwrap();
        let init_p: Vec<f64> = perm.iter().map(|&p| init[p]).collect();
        let labels_p: Vec<u64> = perm.iter().map(|&p| labels[p]).collect();
        let b = simulate_particles(&kernel, &init_p, &labels_p, 2.0, &rep, &ParticleOptions::default()).unwrap();
        for (q, &p) in perm.iter().enumerate() {
            assert_eq!(b.terminal[q], a.terminal[p]);
            assert_eq!(b.event_counts[q], a.event_counts[p]);
        }
    }

    #[test]
    fn event_counts_are_poisson() {
        let kernel = KernelSet::new(1, |_, _, _, out| out[0] = 0.0);
        let (n, t) = (32, 2.0);
        let run = simulate_replica(&kernel, &InitialLaw::Point(vec![0.0]), n, t, &replica(5, 0), &ParticleOptions {
            record_events: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(run.total_events() as usize, run.events.as_ref().unwrap().len());
        let counts: Vec<f64> = run.event_counts.iter().map(|&c| c as f64).collect();
        let m = mean_ci(&counts);
        let lambda = n as f64 * t;
        assert!((m.value - lambda).abs() < 1.96 * 1.5 * (lambda / n as f64).sqrt(), "{m:?}");
        let ev = run.events.unwrap();
        assert!(ev.windows(2).all(|w| w[0].time < w[1].time));
    }

    #[test]
    fn features_agree_with_naive_sum() {
        let kernel = sin_kernel();
        let rep = replica(6, 0);
        let init = sample_initial(&std_normal(), 24, &rep);
        let labels: Vec<u64> = (0..24).collect();
        let fast = simulate_particles(&kernel, &init, &labels, 1.0, &rep, &ParticleOptions { fluctuation: true, ..Default::default() }).unwrap();
        let slow = simulate_particles(&kernel, &init, &labels, 1.0, &rep, &ParticleOptions { fluctuation: true, naive: true, ..Default::default() }).unwrap();
        for (a, b) in fast.terminal.iter().zip(&slow.terminal) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((fast.fluctuation.unwrap() - slow.fluctuation.unwrap()).abs() < 1e-10);
    }

    #[test]
    fn y_independent_kernel_has_zero_gap() {
        let kernel = KernelSet::new(1, |_, x, _, out| out[0] = x[0].cos())
            .with_features(vec![Feature::new(|x, g| g[0] = x[0].cos(), |_| 1.0)]);
        let flow = Arc::new(LimitFlow::build(&kernel, &std_normal(), 1.0, &PicardOptions::for_particles(8), &replica(7, 99)).unwrap());
        let run = simulate_coupled(&kernel, &std_normal(), 8, 1.0, &replica(7, 0), flow).unwrap();
        assert!(run.coupling_sup_sq.unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(run.coupled_terminal.unwrap(), run.terminal);
    }

    #[test]
    fn single_particle_coupling_is_finite() {
        let kernel = KernelSet::new(1, |_, x, y, out| out[0] = -(x[0] - y[0]))
            .with_closed_limit(|_, x, out| out[0] = -x[0]);
        let flow = Arc::new(LimitFlow::build(&kernel, &std_normal(), 1.0, &PicardOptions::for_particles(1), &replica(8, 9)).unwrap());
        let run = simulate_coupled(&kernel, &std_normal(), 1, 1.0, &replica(8, 0), flow).unwrap();
        let g = run.coupling_sup_sq.unwrap()[0];
        assert!(g.is_finite() && g > 0.0);
        // Self-interaction vanishes, so the particle never moves.
        assert_eq!(run.terminal, run.initial);
    }

    #[test]
    fn identical_systems_have_zero_chaos_error() {
        let run = ParticleRun {
            n: 2,
            dim: 1,
            horizon: 1.0,
            initial: vec![0.0; 2],
            terminal: vec![0.0; 2],
            event_counts: vec![0; 2],
            events: None,
            coupled_terminal: Some(vec![0.0; 2]),
            coupling_sup_sq: Some(vec![0.0; 2]),
            fluctuation: None,
        };
        let e = chaos_error(&[run.clone(), run]);
        assert_eq!(e.pooled.value, 0.0);
        assert_eq!(e.max_particle, 0.0);
    }

    #[test]
    fn picard_flow_for_sine_kernel() {
        // Symmetric start keeps E sin X_t = 0; then each point follows
        // x' = C(t) sin x with C = E cos X_t, so tan(x_t/2) = tan(x_0/2) e^{A(t)}.
        let kernel = sin_kernel();
        let flow = LimitFlow::picard(&kernel, &std_normal(), 1.0, &PicardOptions::for_particles(64), &replica(9, 0)).unwrap();
        assert!(flow.sweeps() < PICARD_MAX_SWEEPS);
        assert!(*flow.gaps().last().unwrap() < PICARD_TOLERANCE);
        let mut b = [0.0];
        flow.bracket(0.0, &[1.0], &mut b);
        let c0 = (-0.5f64).exp();
        assert!((b[0] - c0 * 1.0f64.sin()).abs() < 1e-4, "{}", b[0]);
        flow.bracket(0.7, &[0.0], &mut b);
        assert!(b[0].abs() < 1e-12);
        // Cross-check C(1) against the explicit flow of the same cloud.
        let k = 1024;
        let cloud = std_normal().cloud(k, &replica(9, 0));
        let a = {
            // A(t) = ∫ C: A' = mean cos(2 atan(tan(x0/2) e^A)).
            let c = |a: f64| cloud.iter().map(|&x0| (2.0 * ((x0 / 2.0).tan() * a.exp()).atan()).cos()).sum::<f64>() / k as f64;
            let (mut a, h) = (0.0f64, 1e-3);
            for _ in 0..1000 {
                let k1 = c(a);
                let k2 = c(a + 0.5 * h * k1);
                let k3 = c(a + 0.5 * h * k2);
                let k4 = c(a + h * k3);
                a += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            a
        };
        let c1 = cloud.iter().map(|&x0| (2.0 * ((x0 / 2.0).tan() * a.exp()).atan()).cos()).sum::<f64>() / k as f64;
        flow.bracket(1.0, &[std::f64::consts::FRAC_PI_2], &mut b);
        assert!((b[0] - c1).abs() < 2e-3, "{} vs {c1}", b[0]);
    }

    #[test]
    fn picard_stalls_on_expanding_kernel() {
        // b(x, y) = 40 y: the mean grows like e^{40 t}; with a horizon of 3
        // the gap cannot reach tolerance within the sweep budget.
        let kernel = KernelSet::new(1, |_, _, y, out| out[0] = 40.0 * y[0])
            .with_features(vec![Feature::new(|_, g| g[0] = 40.0, |y| y[0])]);
        let law = InitialLaw::Normal { dim: 1, mean: 1.0, sd: 0.1 };
        let opts = PicardOptions { cloud: 16, steps: 50, ..PicardOptions::for_particles(1) };
        let r = LimitFlow::picard(&kernel, &law, 3.0, &opts, &replica(10, 0));
        assert!(matches!(r, Err(McKeanError::PicardStalled { .. })));
    }

    #[test]
    fn constant_kernel_fluctuation_variance() {
        // Y = c (Σ_i N_i(T))/N − c N T: Var = c² T.
        let c = 1.5;
        let kernel = KernelSet::new(1, move |_, _, _, out| out[0] = c);
        let runs: Vec<ParticleRun> = (0..400)
            .map(|r| {
                simulate_replica(&kernel, &InitialLaw::Point(vec![0.0]), 16, 1.0, &replica(11, r), &ParticleOptions { fluctuation: true, ..Default::default() }).unwrap()
            })
            .collect();
        let v = fluctuation_variance(&runs);
        assert!((v.value - c * c).abs() < 1.5 * v.ci, "{v:?}");
        let zero = KernelSet::new(1, |_, _, _, out| out[0] = 0.0);
        let run = simulate_replica(&zero, &std_normal(), 8, 1.0, &replica(11, 0), &ParticleOptions { fluctuation: true, ..Default::default() }).unwrap();
        assert_eq!(run.fluctuation, Some(0.0));
    }

    #[test]
    fn empirical_measure_sampling_bound() {
        // E |f(ξ_i, μ_N) − f(ξ_i, μ)|² ≤ C/N for f(x, y) = sin(x − y), ξ ~ N(0,1),
        // where f(x, μ) = e^{-1/2} sin x.
        let est = |n: usize, reps: u64| {
            let mut acc = 0.0;
            for r in 0..reps {
                let mut s = replica(12, r * 1000 + n as u64);
                let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
                let emp = xs.iter().map(|y| (xs[0] - y).sin()).sum::<f64>() / n as f64;
                acc += (emp - (-0.5f64).exp() * xs[0].sin()).powi(2);
            }
            acc / reps as f64
        };
        let c = 8.0 * est(8, 20_000);
        for n in [32usize, 128] {
            let e = est(n, 20_000);
            assert!(e <= 1.2 * c / n as f64, "n={n}: {e} vs {}", c / n as f64);
        }
    }

    #[test]
    fn event_csv_layout() {
        let kernel = KernelSet::new(1, |_, _, _, out| out[0] = 1.0);
        let run = simulate_replica(&kernel, &InitialLaw::Point(vec![0.0]), 2, 0.5, &replica(13, 0), &ParticleOptions { record_events: true, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        run.write_events_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("event_idx,time,particle,state_1\n"));
        assert_eq!(text.lines().count() as u64, run.total_events() + 1);
    }
}
