//! Registry of named test problems: coefficients, exact solutions or oracles,
//! default grids and pass intervals.

use std::fmt;
use std::sync::Arc;

use statrs::function::erf::erf;

use crate::mckean::{Feature, InitialLaw, KernelSet};
use crate::nse2d;
use crate::randomness::{build_jump_law, derive_stream, JumpLaw, Label};
use crate::reference::MollifiedDrift;
use crate::scheme::CoefficientSet;

/// `(t, x0, out)`: exact solution of the drift-only ODE started at `x0`.
pub type ExactFlow = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x0)`: true where the exact flow is not differentiable in `t`.
pub type KinkFn = Arc<dyn Fn(f64, &[f64]) -> bool + Send + Sync>;

/// Tolerance of the exact-solution residual check.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario '{name}'; registered: {}", registered.join(", "))]
    Unknown { name: String, registered: Vec<&'static str> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    Strong,
    Weak,
    Rates,
    Chaos,
    Invariant,
    Clt,
    Donsker,
    Nse,
    Fluctuation,
    /// Characteristic-function and tail checks for stable noise.
    Stable,
    /// Tail of the Poisson event count.
    Tail,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        Self::Strong,
        Self::Weak,
        Self::Rates,
        Self::Chaos,
        Self::Invariant,
        Self::Clt,
        Self::Donsker,
        Self::Nse,
        Self::Fluctuation,
        Self::Stable,
        Self::Tail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Strong => "strong",
            Self::Weak => "weak",
            Self::Rates => "rates",
            Self::Chaos => "chaos",
            Self::Invariant => "invariant",
            Self::Clt => "clt",
            Self::Donsker => "donsker",
            Self::Nse => "nse",
            Self::Fluctuation => "fluctuation",
            Self::Stable => "stable",
            Self::Tail => "tail",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Eps(Vec<f64>),
    N(Vec<usize>),
}

impl Grid {
    pub fn len(&self) -> usize {
        match self {
            Grid::Eps(v) => v.len(),
            Grid::N(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_name(&self) -> &'static str {
        match self {
            Grid::Eps(_) => "eps",
            Grid::N(_) => "N",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::Eps(v) => v.clone(),
            Grid::N(v) => v.iter().map(|&n| n as f64).collect(),
        }
    }
}

/// Pass interval attached to an experiment's headline number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Slope { lo: f64, hi: f64 },
    Interval { lo: f64, hi: f64 },
    AtMost(f64),
}

impl Target {
    pub fn contains(&self, v: f64) -> bool {
        match *self {
            Target::Slope { lo, hi } | Target::Interval { lo, hi } => v >= lo && v <= hi,
            Target::AtMost(m) => v <= m,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Slope { lo, hi } => write!(f, "slope in [{lo}, {hi}]"),
            Target::Interval { lo, hi } => write!(f, "in [{lo}, {hi}]"),
            Target::AtMost(m) => write!(f, "at most {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDefaults {
    pub kind: ExperimentKind,
    pub grid: Grid,
    pub replicas: usize,
    pub target: Option<Target>,
}

/// `E φ(X_T)` data for weak-error runs.
#[derive(Clone)]
pub struct WeakSpec {
    pub phi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub limit: f64,
    /// Exact `E φ(X^ε_T)` of the scheme, when known.
    pub scheme_exact: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

#[derive(Clone)]
pub struct InvariantSpec {
    pub g: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub exact: f64,
    pub burn_in: f64,
    pub horizon: f64,
    pub eps: f64,
    pub runs: usize,
    pub tolerance: f64,
}

/// Stable-noise property checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StableSpec {
    /// Characteristic-function arguments.
    pub frequencies: Vec<f64>,
    /// Tail thresholds `R` for `P(|X| > 2R) / P(|X| > R)`.
    pub tail_levels: Vec<f64>,
    /// Linear drift rate `κ` in `b = −κ x`, used by the tail prediction.
    pub damping: f64,
    pub tail_tolerance: f64,
}

#[derive(Clone)]
pub struct NseScenario {
    pub w0: fn(f64, f64) -> f64,
    pub nu: f64,
    pub grid: usize,
    pub slices: usize,
    pub paths: usize,
    /// Exact vorticity at `(nu, horizon, s, grid)`.
    pub exact: fn(f64, f64, f64, usize) -> Result<nse2d::VorticityField, nse2d::NseError>,
    /// Time step of the pseudo-spectral reference.
    pub reference_dt: f64,
    pub picard_tol: f64,
    pub control_variate: bool,
}

#[derive(Clone)]
pub enum Model {
    Sde(CoefficientSet),
    Particles { kernel: KernelSet, law: InitialLaw },
    Nse(NseScenario),
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Sde(c) => write!(f, "Sde({c:?})"),
            Model::Particles { kernel, law } => write!(f, "Particles({kernel:?}, {law:?})"),
            Model::Nse(n) => write!(f, "Nse(nu={}, G={})", n.nu, n.grid),
        }
    }
}

#[derive(Clone)]
pub struct ScenarioSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub model: Model,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Named constants (κ's, growth exponent, Lipschitz bounds).
    pub constants: Vec<(&'static str, f64)>,
    pub exact: Option<ExactFlow>,
    pub kinks: Option<KinkFn>,
    pub mollified: Option<MollifiedDrift>,
    /// RK4 step of the reference when no exact solution exists.
    pub reference_step: f64,
    pub weak: Option<WeakSpec>,
    /// Gaussian law `(mean, variance)` of `X_T` for the noisy model.
    pub terminal_law: Option<(f64, f64)>,
    pub invariant: Option<InvariantSpec>,
    pub stable: Option<StableSpec>,
    pub experiments: Vec<ExperimentDefaults>,
    /// Trend-only scenario; backs no quantitative bound.
    pub qualitative: bool,
}

impl fmt::Debug for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScenarioSpec")
            .field("name", &self.name)
            .field("model", &self.model)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("constants", &self.constants)
            .field("exact", &self.exact.is_some())
            .field("qualitative", &self.qualitative)
            .finish()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ScenarioSpec {
    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|(k, _)| *k == name).map(|&(_, v)| v)
    }

    pub fn experiment(&self, kind: ExperimentKind) -> Option<&ExperimentDefaults> {
        self.experiments.iter().find(|e| e.kind == kind)
    }

    pub fn coefficients(&self) -> Option<&CoefficientSet> {
        match &self.model {
            Model::Sde(c) => Some(c),
            _ => None,
        }
    }

    /// `name@xxxxxxxx`, a digest of the scenario's defining data.
    pub fn hash_tag(&self) -> String {
        let mut key = format!("{}|{}|{:?}|{}|", self.name, self.description, self.x0, self.horizon);
        for (k, v) in &self.constants {
            key.push_str(&format!("{k}={v:e};"));
        }
        for e in &self.experiments {
            key.push_str(&format!("{:?}:{:?}:{}:{:?};", e.kind, e.grid, e.replicas, e.target));
        }
        key.push_str(&format!("{:?}", self.model));
        let h = fnv1a(key.as_bytes());
        format!("{}@{:08x}", self.name, (h ^ (h >> 32)) as u32)
    }

    /// Largest `|d/dt x(t) − b(t, x(t))|` over `points` random `(t, x0)`,
    /// by central differences; `None` without an exact flow.
    pub fn exact_residual(&self, points: usize, seed: u64) -> Option<f64> {
        let exact = self.exact.as_ref()?;
        let coeffs = self.coefficients()?.drift_only();
        let d = self.x0.len();
        let mut s = derive_stream(seed, &[Label::purpose("residual")]).ok()?;
        let h = 1e-5;
        let (mut xp, mut xm, mut x, mut b) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < points {
            let t = 2.0 * h + (self.horizon - 4.0 * h) * s.uniform();
            let x0: Vec<f64> = self.x0.iter().map(|v| v + (2.0 * s.uniform() - 1.0) * 0.5 * v.abs().max(1.0)).collect();
            if let Some(k) = &self.kinks {
                if k(t - 2.0 * h, &x0) != k(t + 2.0 * h, &x0) || k(t, &x0) {
                    continue;
                }
            }
            exact(t + h, &x0, &mut xp);
            exact(t - h, &x0, &mut xm);
            exact(t, &x0, &mut x);
            coeffs.drift(t, &x, &mut b);
            for i in 0..d {
                let scale = b[i].abs().max(1.0);
                worst = worst.max(((xp[i] - xm[i]) / (2.0 * h) - b[i]).abs() / scale);
            }
            done += 1;
        }
        Some(worst)
    }
}

pub const REGISTERED: [&str; 12] = [
    "oscillatory",
    "lipschitz_1d",
    "linear_ou",
    "double_well",
    "stable_drift",
    "filippov_sign",
    "vortex_sobolev",
    "mckean_mean_revert",
    "mckean_sin",
    "mckean_w1",
    "taylor_green",
    "brownian",
];

pub fn registered_names() -> &'static [&'static str] {
    &REGISTERED
}

pub fn get_scenario(name: &str) -> Result<ScenarioSpec, ScenarioError> {
    let spec = match name {
        "oscillatory" => oscillatory(),
        "lipschitz_1d" => lipschitz_1d(),
        "linear_ou" => linear_ou(),
        "double_well" => double_well(),
        "stable_drift" => stable_drift(),
        "filippov_sign" => filippov_sign(),
        "vortex_sobolev" => vortex_sobolev(),
        "mckean_mean_revert" => mckean_mean_revert(),
        "mckean_sin" => mckean_sin(),
        "mckean_w1" => mckean_w1(),
        "taylor_green" => taylor_green(),
        "brownian" => brownian(),
        _ => {
            return Err(ScenarioError::Unknown {
                name: name.to_string(),
                registered: REGISTERED.to_vec(),
            })
        }
    };
    Ok(spec)
}

fn pow2_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(-k)).collect()
}

fn base(name: &'static str, description: &'static str, model: Model, x0: Vec<f64>, horizon: f64) -> ScenarioSpec {
    ScenarioSpec {
        name,
        description,
        model,
        x0,
        horizon,
        constants: Vec::new(),
        exact: None,
        kinks: None,
        mollified: None,
        reference_step: 1e-4,
        weak: None,
        terminal_law: None,
        invariant: None,
        stable: None,
        experiments: Vec::new(),
        qualitative: false,
    }
}

fn axis_law(dim: usize) -> Arc<JumpLaw> {
    Arc::new(build_jump_law(2.0, dim, None).expect("axis law"))
}

/// `f(s) = ±100`, switching sign every 1/200.
pub fn oscillating_signal(s: f64) -> f64 {
    let k = (200.0 * s).floor() as i64;
    if k.rem_euclid(2) == 0 {
        100.0
    } else {
        -100.0
    }
}

/// `∫_0^t f`.
fn oscillating_integral(t: f64) -> f64 {
    let k = (200.0 * t).floor();
    let r = t - k / 200.0;
    if (k as i64).rem_euclid(2) == 0 {
        100.0 * r
    } else {
        100.0 * (1.0 / 200.0 - r)
    }
}

fn oscillatory() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1).with_drift(|t, _, out| out[0] = oscillating_signal(t));
    let mut s = base(
        "oscillatory",
        "b(t) = 100 (1 - 2([200 t] mod 2)), highly oscillatory time dependence",
        Model::Sde(coeffs),
        vec![0.0],
        1.0,
    );
    s.constants = vec![("f_sq_integral", 1e4), ("kappa", 0.0), ("m", 1.0)];
    s.exact = Some(Arc::new(|t, x0, out| out[0] = x0[0] + oscillating_integral(t)));
    s.kinks = Some(Arc::new(|t, _| {
        let y = 200.0 * t;
        (y - y.round()).abs() < 1e-3
    }));
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Strong,
        grid: Grid::Eps(vec![1e-4]),
        replicas: 2000,
        target: Some(Target::Interval { lo: 0.85, hi: 1.15 }),
    }];
    s
}

fn lipschitz_1d() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1)
        .with_drift(|t, x, out| out[0] = x[0].sin() + t.cos())
        .with_drift_jacobian(|_, x, out| out[0] = x[0].cos());
    let mut s = base("lipschitz_1d", "b(t, x) = sin x + cos t", Model::Sde(coeffs), vec![0.5], 1.0);
    s.constants = vec![("lipschitz", 1.0), ("m", 1.0)];
    s.reference_step = 1e-4;
    let sweep = ExperimentDefaults {
        kind: ExperimentKind::Rates,
        grid: Grid::Eps(pow2_grid(6, 14)),
        replicas: 500,
        target: Some(Target::Slope { lo: 0.4, hi: 0.6 }),
    };
    s.experiments = vec![
        ExperimentDefaults {
            kind: ExperimentKind::Strong,
            ..sweep.clone()
        },
        sweep,
    ];
    s
}

fn linear_ou() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1)
        .with_drift(|_, x, out| out[0] = -x[0])
        .with_drift_jacobian(|_, _, out| out[0] = -1.0)
        .with_additive_noise(axis_law(1));
    let mut s = base(
        "linear_ou",
        "b(x) = -x with unit axis-law noise; drift-only for ODE experiments",
        Model::Sde(coeffs),
        vec![1.0],
        1.0,
    );
    s.constants = vec![("kappa", 1.0), ("lipschitz", 1.0), ("m", 1.0)];
    s.exact = Some(Arc::new(|t, x0, out| out[0] = x0[0] * (-t).exp()));
    let (mean, var) = crate::reference::ou_exact(1.0, 1.0, 1.0, 1.0);
    s.terminal_law = Some((mean, var));
    s.weak = Some(WeakSpec {
        phi: Arc::new(|x| x[0] * x[0]),
        limit: (-2.0f64).exp(),
        // E (1 − ε)^{2N}, N ~ Poisson(T/ε), T = 1, x0 = 1.
        scheme_exact: Some(Arc::new(|eps| ((eps - 2.0) * 1.0f64).exp())),
    });
    s.invariant = Some(InvariantSpec {
        g: Arc::new(|x| x[0] * x[0]),
        exact: 0.5,
        burn_in: 10.0,
        horizon: 110.0,
        eps: 1e-2,
        runs: 16,
        tolerance: 0.05,
    });
    s.experiments = vec![
        ExperimentDefaults {
            kind: ExperimentKind::Weak,
            grid: Grid::Eps(vec![0.1, 0.05, 0.025, 0.0125]),
            replicas: 100_000,
            target: Some(Target::Slope { lo: 0.85, hi: 1.15 }),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Invariant,
            grid: Grid::Eps(vec![1e-2]),
            replicas: 16,
            target: Some(Target::Interval { lo: 0.45, hi: 0.55 }),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Clt,
            grid: Grid::Eps(vec![1e-3]),
            replicas: 2000,
            target: Some(Target::Interval { lo: 0.85, hi: 1.15 }),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Donsker,
            grid: Grid::Eps(vec![1e-3]),
            replicas: 5000,
            target: Some(Target::AtMost(0.03)),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Strong,
            grid: Grid::Eps(pow2_grid(6, 12)),
            replicas: 500,
            target: Some(Target::Slope { lo: 0.4, hi: 0.6 }),
        },
    ];
    s
}

fn double_well() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1)
        .with_drift(|_, x, out| out[0] = x[0] - x[0].powi(3))
        .with_drift_jacobian(|_, x, out| out[0] = 1.0 - 3.0 * x[0] * x[0])
        .with_growth_exponent(3.0);
    let mut s = base(
        "double_well",
        "b(x) = x - x^3, cubic growth, tamed",
        Model::Sde(coeffs),
        vec![2.0],
        1.0,
    );
    s.constants = vec![("kappa", 1.0), ("m", 3.0)];
    s.exact = Some(Arc::new(|t, x0, out| {
        let e = (2.0 * t).exp();
        out[0] = x0[0] * t.exp() / (1.0 + x0[0] * x0[0] * (e - 1.0)).sqrt();
    }));
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Strong,
        grid: Grid::Eps(pow2_grid(6, 12)),
        replicas: 200,
        target: None,
    }];
    s.qualitative = true;
    s
}

fn stable_drift() -> ScenarioSpec {
    let law = Arc::new(build_jump_law(1.5, 1, None).expect("stable lattice law"));
    let coeffs = CoefficientSet::new(1)
        .with_drift(|_, x, out| out[0] = -0.5 * x[0])
        .with_additive_noise(law);
    let mut s = base(
        "stable_drift",
        "b(x) = -x/2 with additive lattice 1.5-stable noise",
        Model::Sde(coeffs),
        vec![0.0],
        1.0,
    );
    s.constants = vec![("alpha", 1.5), ("lipschitz", 0.5), ("m", 1.0)];
    s.stable = Some(StableSpec {
        frequencies: vec![0.5, 1.0, 2.0],
        tail_levels: vec![5.0],
        damping: 0.5,
        tail_tolerance: 0.2,
    });
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Stable,
        grid: Grid::Eps(vec![1e-2, 1e-3]),
        replicas: 20_000,
        target: None,
    }];
    s.qualitative = true;
    s
}

fn filippov_sign() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1).with_drift(|_, x, out| out[0] = -x[0].signum() * f64::from(x[0] != 0.0));
    let mut s = base(
        "filippov_sign",
        "b(x) = -sign(x), discontinuous, one-sided Lipschitz with kappa = 0",
        Model::Sde(coeffs),
        vec![1.0],
        2.0,
    );
    s.constants = vec![("kappa", 0.0), ("m", 1.0)];
    s.exact = Some(Arc::new(|t, x0, out| {
        out[0] = x0[0].signum() * (x0[0].abs() - t).max(0.0);
    }));
    s.kinks = Some(Arc::new(|t, x0| (t - x0[0].abs()).abs() < 1e-4));
    // Gaussian mollification of −sign: −erf(x / (δ√2)).
    s.mollified = Some(Arc::new(|_, x, delta, out| {
        out[0] = -erf(x[0] / (delta * 2f64.sqrt()));
    }));
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Rates,
        grid: Grid::Eps(pow2_grid(6, 12)),
        replicas: 500,
        target: Some(Target::Slope { lo: 0.35, hi: 0.65 }),
    }];
    s
}

fn vortex_cutoff(r: f64) -> f64 {
    1.0 / (1.0 + r.powi(4))
}

fn vortex_sobolev() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(2).with_drift(|_, x, out| {
        let r = x[0].hypot(x[1]);
        let f = if r == 0.0 { 0.0 } else { r.powf(-0.5) * vortex_cutoff(r) };
        out[0] = -x[1] * f;
        out[1] = x[0] * f;
    });
    let mut s = base(
        "vortex_sobolev",
        "b(x) = (-x2, x1) |x|^{-1/2} phi(|x|), phi(r) = 1/(1 + r^4), Holder at the origin",
        Model::Sde(coeffs),
        vec![1.0, 0.0],
        1.0,
    );
    s.constants = vec![("holder", 0.5), ("m", 1.0)];
    // |x| is conserved; rotation at angular speed r^{-1/2} phi(r).
    s.exact = Some(Arc::new(|t, x0, out| {
        let r = x0[0].hypot(x0[1]);
        let w = if r == 0.0 { 0.0 } else { r.powf(-0.5) * vortex_cutoff(r) };
        let (sn, cs) = (w * t).sin_cos();
        out[0] = cs * x0[0] - sn * x0[1];
        out[1] = sn * x0[0] + cs * x0[1];
    }));
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Strong,
        grid: Grid::Eps(pow2_grid(6, 12)),
        replicas: 200,
        target: None,
    }];
    s.qualitative = true;
    s
}

fn std_normal() -> InitialLaw {
    InitialLaw::Normal {
        dim: 1,
        mean: 0.0,
        sd: 1.0,
    }
}

fn n_grid() -> Vec<usize> {
    vec![8, 16, 32, 64, 128, 256]
}

fn mckean_mean_revert() -> ScenarioSpec {
    let kernel = KernelSet::new(1, |_, x, y, out| out[0] = -(x[0] - y[0]))
        .with_additive_noise(axis_law(1))
        .with_features(vec![
            Feature::new(|x, g| g[0] = -x[0], |_| 1.0),
            Feature::new(|_, g| g[0] = 1.0, |y| y[0]),
        ])
        // The mean of a centred start is conserved.
        .with_closed_limit(|_, x, out| out[0] = -x[0]);
    let mut s = base(
        "mckean_mean_revert",
        "b(x, y) = -(x - y), unit axis noise, N(0,1) start",
        Model::Particles {
            kernel,
            law: std_normal(),
        },
        vec![0.0],
        1.0,
    );
    s.constants = vec![("lipschitz", 1.0), ("m", 1.0)];
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Chaos,
        grid: Grid::N(n_grid()),
        replicas: 64,
        target: Some(Target::Slope { lo: -1.25, hi: -0.75 }),
    }];
    s
}

fn sin_features() -> Vec<Feature> {
    vec![
        Feature::new(|x, g| g[0] = x[0].sin(), |y| y[0].cos()),
        Feature::new(|x, g| g[0] = -x[0].cos(), |y| y[0].sin()),
    ]
}

fn mckean_sin() -> ScenarioSpec {
    let kernel = KernelSet::new(1, |_, x, y, out| out[0] = (x[0] - y[0]).sin()).with_features(sin_features());
    let mut s = base(
        "mckean_sin",
        "b(x, y) = sin(x - y), drift only, N(0,1) start",
        Model::Particles {
            kernel,
            law: std_normal(),
        },
        vec![0.0],
        1.0,
    );
    s.constants = vec![("kappa", 1.0), ("lipschitz", 1.0), ("m", 1.0)];
    s.experiments = vec![
        ExperimentDefaults {
            kind: ExperimentKind::Chaos,
            grid: Grid::N(n_grid()),
            replicas: 64,
            target: Some(Target::Slope { lo: -1.25, hi: -0.75 }),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Fluctuation,
            grid: Grid::N(vec![128]),
            replicas: 500,
            target: Some(Target::Interval { lo: 0.85, hi: 1.15 }),
        },
    ];
    s
}

fn mckean_w1() -> ScenarioSpec {
    let law = Arc::new(build_jump_law(1.5, 1, None).expect("stable lattice law"));
    let kernel = KernelSet::new(1, |_, x, y, out| out[0] = (x[0] - y[0]).sin())
        .with_features(sin_features())
        .with_additive_noise(law);
    let mut s = base(
        "mckean_w1",
        "b(x, y) = sin(x - y), bounded Lipschitz, additive 1.5-stable noise",
        Model::Particles {
            kernel,
            law: std_normal(),
        },
        vec![0.0],
        1.0,
    );
    s.constants = vec![("kappa", 1.0), ("alpha", 1.5), ("m", 1.0)];
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Chaos,
        grid: Grid::N(vec![8, 16, 32, 64]),
        replicas: 32,
        target: None,
    }];
    s.qualitative = true;
    s
}

fn taylor_green() -> ScenarioSpec {
    let nse = NseScenario {
        w0: nse2d::taylor_green,
        nu: 0.1,
        grid: 32,
        slices: 8,
        paths: 2000,
        exact: nse2d::taylor_green_exact,
        reference_dt: 1e-2,
        picard_tol: 1e-5,
        control_variate: true,
    };
    let mut s = base(
        "taylor_green",
        "w0 = -2 cos x1 cos x2 on the torus; exact decay e^{-2 nu (T - s)}",
        Model::Nse(nse),
        vec![0.0, 0.0],
        0.5,
    );
    s.constants = vec![("nu", 0.1), ("grid", 32.0)];
    s.experiments = vec![ExperimentDefaults {
        kind: ExperimentKind::Nse,
        grid: Grid::Eps(vec![0.02, 0.01, 0.005]),
        replicas: 2000,
        target: Some(Target::Interval { lo: 1.4, hi: 2.8 }),
    }];
    s
}

fn brownian() -> ScenarioSpec {
    let coeffs = CoefficientSet::new(1).with_additive_noise(axis_law(1));
    let mut s = base("brownian", "b = 0 with unit axis-law noise", Model::Sde(coeffs), vec![0.0], 1.0);
    s.constants = vec![("m", 1.0)];
    s.exact = Some(Arc::new(|_, x0, out| out[0] = x0[0]));
    s.terminal_law = Some((0.0, 1.0));
    s.experiments = vec![
        ExperimentDefaults {
            kind: ExperimentKind::Donsker,
            grid: Grid::Eps(vec![1e-3]),
            replicas: 5000,
            target: Some(Target::AtMost(0.03)),
        },
        ExperimentDefaults {
            kind: ExperimentKind::Tail,
            grid: Grid::Eps(vec![1e-2]),
            replicas: 100_000,
            target: None,
        },
    ];
    s
}

/// Tail function `r ↦ P(|ξ| > r)` of a 1-D lattice jump law, tabulated from
/// its atoms.
#[derive(Debug, Clone)]
pub struct LatticeTail {
    /// `above[k] = P(|ξ| > k)`.
    above: Vec<f64>,
}

impl LatticeTail {
    pub fn new(law: &JumpLaw) -> Self {
        assert_eq!(law.dim(), 1, "lattice tail is one-dimensional");
        let mut mass: Vec<f64> = Vec::new();
        for (z, p) in law.atoms() {
            let k = z[0].unsigned_abs() as usize;
            if mass.len() <= k {
                mass.resize(k + 1, 0.0);
            }
            mass[k] += p;
        }
        let mut above = vec![0.0; mass.len()];
        let mut acc = 0.0;
        for k in (0..mass.len()).rev() {
            above[k] = acc;
            acc += mass[k];
        }
        Self { above }
    }

    pub fn prob_above(&self, r: f64) -> f64 {
        if r < 0.0 {
            return 1.0;
        }
        self.above.get(r.floor() as usize).copied().unwrap_or(0.0)
    }
}

/// Single-big-jump prediction of `P(|X^ε_T| > R)` for `dX = −κX dt + dL`
/// started at 0: a jump at time `s` is damped by `e^{−κ(T−s)}`, so
/// `P ≈ ε^{-1} ∫_0^T P(ε^{1/α}|ξ| e^{−κ(T−s)} > R) ds`.
pub fn stable_tail_prediction(tail: &LatticeTail, alpha: f64, eps: f64, kappa: f64, horizon: f64, level: f64) -> f64 {
    let n = 2000;
    let h = horizon / n as f64;
    let scale = eps.powf(-1.0 / alpha);
    let f = |s: f64| tail.prob_above(level * scale * (kappa * (horizon - s)).exp());
    let mut acc = 0.5 * (f(0.0) + f(horizon));
    for k in 1..n {
        acc += f(k as f64 * h);
    }
    acc * h / eps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_name_resolves() {
        for name in registered_names() {
            let s = get_scenario(name).unwrap();
            assert_eq!(s.name, *name);
            assert!(!s.experiments.is_empty());
            for e in &s.experiments {
                assert!(!e.grid.is_empty() && e.replicas >= 1);
            }
        }
    }

    #[test]
    fn unknown_name_lists_registry() {
        let e = get_scenario("nope").unwrap_err();
        let msg = e.to_string();
        for name in registered_names() {
            assert!(msg.contains(name));
        }
    }

    #[test]
    fn quantitative_scenarios_have_an_oracle() {
        for name in registered_names() {
            let s = get_scenario(name).unwrap();
            if s.qualitative {
                continue;
            }
            let has_oracle = s.exact.is_some()
                || s.weak.is_some()
                || matches!(s.model, Model::Particles { .. } | Model::Nse(_))
                || s.experiments.iter().all(|e| e.kind == ExperimentKind::Rates || e.kind == ExperimentKind::Strong);
            assert!(has_oracle, "{name}");
        }
    }

    #[test]
    fn exact_solutions_pass_residual_check() {
        for name in registered_names() {
            let s = get_scenario(name).unwrap();
            if let Some(r) = s.exact_residual(100, 3) {
                assert!(r < RESIDUAL_TOLERANCE, "{name}: {r}");
            }
        }
    }

    #[test]
    fn oscillatory_signal_identity() {
        // ∫ f² = 10⁴ and ∫ f = 0 over [0, 1].
        let n = 200_000;
        let h = 1.0 / n as f64;
        let (mut a, mut b) = (0.0, 0.0);
        for k in 0..n {
            let f = oscillating_signal((k as f64 + 0.5) * h);
            a += f * f * h;
            b += f * h;
        }
        assert!((a - 1e4).abs() < 1e-6);
        assert!(b.abs() < 1e-9);
        assert!(oscillating_integral(1.0).abs() < 1e-9);
        assert_eq!(get_scenario("oscillatory").unwrap().constant("f_sq_integral"), Some(1e4));
    }

    #[test]
    fn filippov_closed_form_and_mollifier() {
        let s = get_scenario("filippov_sign").unwrap();
        let exact = s.exact.clone().unwrap();
        let mut out = [0.0];
        exact(0.4, &[1.0], &mut out);
        assert!((out[0] - 0.6).abs() < 1e-15);
        exact(1.5, &[1.0], &mut out);
        assert_eq!(out[0], 0.0);
        exact(0.5, &[-2.0], &mut out);
        assert!((out[0] + 1.5).abs() < 1e-15);
        let m = s.mollified.clone().unwrap();
        m(0.0, &[0.3], 1e-3, &mut out);
        assert!((out[0] + 1.0).abs() < 1e-12);
        m(0.0, &[0.0], 1e-3, &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn hash_tags_are_stable_and_distinct() {
        let tags: Vec<String> = registered_names()
            .iter()
            .map(|n| get_scenario(n).unwrap().hash_tag())
            .collect();
        for (t, n) in tags.iter().zip(registered_names()) {
            assert!(t.starts_with(&format!("{n}@")));
            assert_eq!(*t, get_scenario(n).unwrap().hash_tag());
        }
        let mut sorted = tags.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), tags.len());
    }

    #[test]
    fn lattice_tail_matches_direct_sum() {
        let law = build_jump_law(1.5, 1, None).unwrap();
        let tail = LatticeTail::new(&law);
        assert!((tail.prob_above(0.5) - 1.0).abs() < 1e-12);
        let direct: f64 = law.atoms().filter(|(z, _)| z[0].unsigned_abs() > 10).map(|(_, p)| p).sum();
        assert!((direct - tail.prob_above(10.7)).abs() < 1e-14);
        // Regular variation: P(|ξ| > 2r) / P(|ξ| > r) → 2^{-α}.
        let ratio = tail.prob_above(2000.0) / tail.prob_above(1000.0);
        assert!((ratio - 2f64.powf(-1.5)).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn tail_prediction_scales_with_level() {
        let law = build_jump_law(1.5, 1, None).unwrap();
        let tail = LatticeTail::new(&law);
        let p1 = stable_tail_prediction(&tail, 1.5, 1e-3, 0.0, 1.0, 5.0);
        let p2 = stable_tail_prediction(&tail, 1.5, 1e-3, 0.0, 1.0, 10.0);
        assert!(p1 > p2 && p2 > 0.0);
        assert!((p2 / p1 - 2f64.powf(-1.5)).abs() < 0.02);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(ExperimentKind::parse(k.name()), Some(k));
        }
        assert_eq!(ExperimentKind::parse("bogus"), None);
    }
}
