//! Backward 2D vorticity Navier-Stokes on the torus `[-π, π]²`:
//! `∂_s w + νΔw + u·∇w = 0`, `w(T) = w0`, `u = K₂ * w`.
//!
//! Fields are stored row-major on the grid `x = -π + j·2π/G`, with the first
//! index along `x₁`.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::randomness::{build_jump_law, derive_stream, JumpLaw, Label, RngStream};
use crate::scheme::{clock_stream, jump_stream};

pub const MIN_GRID: usize = 8;
/// Relative bound on `k·û(k)` for a discretely divergence-free field.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-10;
/// Consecutive non-decreasing Picard gaps tolerated before giving up.
pub const PICARD_PATIENCE: usize = 3;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NseError {
    #[error("grid size {0} must be a power of two and at least {MIN_GRID}")]
    GridSize(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("Picard gap stopped decreasing; history {gaps:?}")]
    PicardStalled { gaps: Vec<f64> },
    #[error("time step {dt} violates the advective limit {limit}")]
    Cfl { dt: f64, limit: f64 },
}

fn check_grid(g: usize) -> Result<(), NseError> {
    if g < MIN_GRID || !g.is_power_of_two() {
        return Err(NseError::GridSize(g));
    }
    Ok(())
}

pub fn grid_coord(g: usize, j: usize) -> f64 {
    -PI + j as f64 * 2.0 * PI / g as f64
}

/// Signed wavenumber of DFT index `i`; the Nyquist index maps to 0 so odd
/// derivatives stay real.
fn wavenumber(g: usize, i: usize) -> f64 {
    if i < g / 2 {
        i as f64
    } else if i == g / 2 {
        0.0
    } else {
        i as f64 - g as f64
    }
}

/// Full wavenumber, Nyquist kept, for even operators.
fn wavenumber_even(g: usize, i: usize) -> f64 {
    if i <= g / 2 {
        i as f64
    } else {
        i as f64 - g as f64
    }
}

/// 2D FFT on a `G × G` row-major grid.
#[derive(Clone)]
pub struct Fft2 {
    g: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(g: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            g,
            forward: planner.plan_fft_forward(g),
            inverse: planner.plan_fft_inverse(g),
        }
    }

    fn transform(&self, data: &mut [Complex<f64>], fft: &Arc<dyn Fft<f64>>) {
        let g = self.g;
        fft.process(data);
        let mut col = vec![Complex::new(0.0, 0.0); g];
        for j in 0..g {
            for i in 0..g {
                col[i] = data[i * g + j];
            }
            fft.process(&mut col);
            for i in 0..g {
                data[i * g + j] = col[i];
            }
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<Complex<f64>> {
        let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    /// Real part of the normalised inverse transform.
    pub fn inverse(&self, spectrum: &[Complex<f64>]) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        self.transform(&mut data, &self.inverse);
        let norm = (self.g * self.g) as f64;
        data.iter().map(|c| c.re / norm).collect()
    }
}

fn fft_for(g: usize) -> Fft2 {
    static CACHE: OnceLock<std::sync::Mutex<Vec<Fft2>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut c = cache.lock().expect("fft cache");
    if let Some(f) = c.iter().find(|f| f.g == g) {
        return f.clone();
    }
    let f = Fft2::new(g);
    c.push(f.clone());
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct VorticityField {
    g: usize,
    values: Vec<f64>,
}

impl VorticityField {
    pub fn new(g: usize, values: Vec<f64>) -> Result<Self, NseError> {
        check_grid(g)?;
        if values.len() != g * g {
            return Err(NseError::InvalidParameter(format!(
                "expected {} values, got {}",
                g * g,
                values.len()
            )));
        }
        Ok(Self { g, values })
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(g: usize, f: F) -> Result<Self, NseError> {
        check_grid(g)?;
        let mut values = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                values.push(f(grid_coord(g, i), grid_coord(g, j)));
            }
        }
        Ok(Self { g, values })
    }

    pub fn zeros(g: usize) -> Result<Self, NseError> {
        Self::new(g, vec![0.0; g * g])
    }

    pub fn grid(&self) -> usize {
        self.g
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.g + j]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `∫ w²` over the torus.
    pub fn enstrophy(&self) -> f64 {
        let cell = (2.0 * PI / self.g as f64).powi(2);
        self.values.iter().map(|v| v * v).sum::<f64>() * cell
    }

    pub fn write_csv<W: Write>(&self, w: W, s: f64) -> io::Result<()> {
        write_matrix(w, self.g, s, "w", &self.values)
    }
}

fn write_matrix<W: Write>(mut w: W, g: usize, s: f64, component: &str, values: &[f64]) -> io::Result<()> {
    writeln!(w, "G,s,component")?;
    writeln!(w, "{g},{s},{component}")?;
    for row in values.chunks_exact(g) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Off-grid evaluation of a velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
    /// Exact trigonometric interpolant; `O(G²)` per point.
    Spectral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    g: usize,
    u1: Vec<f64>,
    u2: Vec<f64>,
    /// Nonzero modes `(k1, k2, û1, û2)` for spectral evaluation.
    modes: Vec<(f64, f64, Complex<f64>, Complex<f64>)>,
}

impl VelocityField {
    pub fn grid(&self) -> usize {
        self.g
    }

    pub fn u1(&self) -> &[f64] {
        &self.u1
    }

    pub fn u2(&self) -> &[f64] {
        &self.u2
    }

    /// Largest pointwise Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        self.u1
            .iter()
            .zip(&self.u2)
            .fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }

    pub fn sup_distance(&self, other: &VelocityField) -> f64 {
        (0..self.u1.len()).fold(0.0, |m, k| {
            m.max((self.u1[k] - other.u1[k]).hypot(self.u2[k] - other.u2[k]))
        })
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.u1.len() as f64;
        [self.u1.iter().sum::<f64>() / n, self.u2.iter().sum::<f64>() / n]
    }

    /// Periodic bilinear interpolation.
    #[inline]
    pub fn bilinear(&self, x1: f64, x2: f64) -> [f64; 2] {
        let g = self.g;
        let h = 2.0 * PI / g as f64;
        let p1 = ((x1 + PI) / h).rem_euclid(g as f64);
        let p2 = ((x2 + PI) / h).rem_euclid(g as f64);
        let i0 = (p1 as usize).min(g - 1);
        let j0 = (p2 as usize).min(g - 1);
        let (a, b) = (p1 - i0 as f64, p2 - j0 as f64);
        let i1 = (i0 + 1) % g;
        let j1 = (j0 + 1) % g;
        let blend = |v: &[f64]| {
            (1.0 - a) * ((1.0 - b) * v[i0 * g + j0] + b * v[i0 * g + j1])
                + a * ((1.0 - b) * v[i1 * g + j0] + b * v[i1 * g + j1])
        };
        [blend(&self.u1), blend(&self.u2)]
    }

    pub fn spectral(&self, x1: f64, x2: f64) -> [f64; 2] {
        let (y1, y2) = (x1 + PI, x2 + PI);
        let norm = (self.g * self.g) as f64;
        let mut out = [0.0; 2];
        for &(k1, k2, c1, c2) in &self.modes {
            let e = Complex::from_polar(1.0, k1 * y1 + k2 * y2);
            out[0] += (c1 * e).re / norm;
            out[1] += (c2 * e).re / norm;
        }
        out
    }

    pub fn evaluate(&self, x1: f64, x2: f64, how: Interpolation) -> [f64; 2] {
        match how {
            Interpolation::Bilinear => self.bilinear(x1, x2),
            Interpolation::Spectral => self.spectral(x1, x2),
        }
    }

    /// `max_k |k·û(k)| / max_k |û(k)|` after a round trip through the grid.
    pub fn divergence_residual(&self) -> f64 {
        let g = self.g;
        let fft = fft_for(g);
        let a = fft.forward(&self.u1);
        let b = fft.forward(&self.u2);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..g {
            for j in 0..g {
                let (k1, k2) = (wavenumber(g, i), wavenumber(g, j));
                let idx = i * g + j;
                worst = worst.max((a[idx] * k1 + b[idx] * k2).norm());
                scale = scale.max(a[idx].norm().max(b[idx].norm()) * k1.abs().max(k2.abs()).max(1.0));
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, s: f64) -> io::Result<()> {
        write_matrix(&mut w, self.g, s, "u1", &self.u1)?;
        write_matrix(&mut w, self.g, s, "u2", &self.u2)
    }
}

/// `u = ∇^⊥ ψ = (−∂₂ψ, ∂₁ψ)` with `Δψ = w`; the mean of `w` is dropped.
pub fn biot_savart(w: &VorticityField) -> VelocityField {
    let g = w.g;
    let fft = fft_for(g);
    let what = fft.forward(&w.values);
    let mut a = vec![Complex::new(0.0, 0.0); g * g];
    let mut b = vec![Complex::new(0.0, 0.0); g * g];
    let i_unit = Complex::new(0.0, 1.0);
    for i in 0..g {
        for j in 0..g {
            let (k1, k2) = (wavenumber(g, i), wavenumber(g, j));
            let kk = k1 * k1 + k2 * k2;
            if kk == 0.0 || i == g / 2 || j == g / 2 {
                continue;
            }
            let idx = i * g + j;
            let psi = -what[idx] / kk;
            a[idx] = -i_unit * k2 * psi;
            b[idx] = i_unit * k1 * psi;
        }
    }
    let u1 = fft.inverse(&a);
    let u2 = fft.inverse(&b);
    let peak = a.iter().chain(&b).fold(0.0f64, |m, c| m.max(c.norm()));
    let mut modes = Vec::new();
    for i in 0..g {
        for j in 0..g {
            let idx = i * g + j;
            if a[idx].norm().max(b[idx].norm()) > 1e-14 * peak {
                modes.push((wavenumber(g, i), wavenumber(g, j), a[idx], b[idx]));
            }
        }
    }
    VelocityField { g, u1, u2, modes }
}

/// Result of the `‖K₂*w‖∞ ≤ C‖w‖∞` regression guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupNormCheck {
    pub ratio: f64,
    pub constant: f64,
    pub holds: bool,
}

/// Random band-limited field with modes `|k|∞ ≤ band`.
pub fn random_band_limited(g: usize, band: i32, stream: &mut RngStream) -> Result<VorticityField, NseError> {
    let mut terms = Vec::new();
    for k1 in -band..=band {
        for k2 in -band..=band {
            if (k1, k2) != (0, 0) {
                let amp = stream.normal() / f64::from(k1 * k1 + k2 * k2);
                let phase = 2.0 * PI * stream.uniform();
                terms.push((f64::from(k1), f64::from(k2), amp, phase));
            }
        }
    }
    VorticityField::from_fn(g, |x1, x2| {
        terms
            .iter()
            .map(|(k1, k2, a, p)| a * (k1 * x1 + k2 * x2 + p).cos())
            .sum()
    })
}

const CORPUS_SEED: u64 = 0x5eed_b105;
const CORPUS_SIZE: u64 = 20;
/// Headroom over the largest ratio seen on the corpus.
const CORPUS_MARGIN: f64 = 1.25;

/// `C` calibrated once on a fixed corpus of random band-limited fields at
/// `G = 32`.
pub fn sup_norm_constant() -> f64 {
    static C: OnceLock<f64> = OnceLock::new();
    *C.get_or_init(|| {
        let mut worst: f64 = 0.0;
        for r in 0..CORPUS_SIZE {
            let mut s = derive_stream(CORPUS_SEED, &[Label::new("corpus", r)]).expect("labels");
            let w = random_band_limited(32, 4, &mut s).expect("grid");
            worst = worst.max(biot_savart(&w).sup_norm() / w.sup_norm());
        }
        worst * CORPUS_MARGIN
    })
}

pub fn sup_norm_bound_check(w: &VorticityField) -> SupNormCheck {
    let constant = sup_norm_constant();
    let ws = w.sup_norm();
    let us = biot_savart(w).sup_norm();
    let ratio = if ws == 0.0 { 0.0 } else { us / ws };
    SupNormCheck {
        ratio,
        constant,
        holds: us <= constant * ws,
    }
}

/// Settings of the Monte-Carlo solver.
#[derive(Debug, Clone, PartialEq)]
pub struct NseConfig {
    pub nu: f64,
    pub eps: f64,
    pub horizon: f64,
    /// Number of evaluation times `s_k = k T / slices`.
    pub slices: usize,
    /// Paths per (grid point, slice); rounded up to even with antithetics.
    pub paths: usize,
    pub picard_tol: f64,
    pub max_iter: usize,
    pub antithetic: bool,
    /// Subtract `w0(x̄ + aH) − E w0(x̄ + aH)`, with `x̄` the noiseless
    /// characteristic and `aH` the path's own jump sum; unbiased.
    pub control_variate: bool,
    pub interpolation: Interpolation,
}

impl Default for NseConfig {
    fn default() -> Self {
        Self {
            nu: 0.1,
            eps: 0.01,
            horizon: 0.5,
            slices: 8,
            paths: 2000,
            picard_tol: 1e-6,
            max_iter: 20,
            antithetic: true,
            control_variate: false,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl NseConfig {
    fn validate(&self) -> Result<(), NseError> {
        if !(self.nu >= 0.0) {
            return Err(NseError::InvalidParameter(format!("viscosity {} must be nonnegative", self.nu)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(NseError::InvalidParameter(format!("eps {} outside (0, 1)", self.eps)));
        }
        if !(self.horizon > 0.0) || self.slices == 0 || self.paths == 0 || self.max_iter == 0 {
            return Err(NseError::InvalidParameter(
                "horizon, slices, paths and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn s_grid(&self) -> Vec<f64> {
        (0..self.slices)
            .map(|k| k as f64 * self.horizon / self.slices as f64)
            .collect()
    }

    /// Jump amplitude `2√(εν)`: with the axis law, `E ξξᵀ = I/2`, so this
    /// gives the generator `νΔ`.
    pub fn jump_amplitude(&self) -> f64 {
        2.0 * (self.eps * self.nu).sqrt()
    }

    fn pairs(&self) -> usize {
        if self.antithetic {
            self.paths.div_ceil(2)
        } else {
            self.paths
        }
    }
}

/// Output of [`solve_nse_poisson`].
#[derive(Debug, Clone)]
pub struct NseSolution {
    pub s_grid: Vec<f64>,
    pub w: Vec<VorticityField>,
    pub u: Vec<VelocityField>,
    /// `max_s ‖u_n(s) − u_{n−1}(s)‖∞` per sweep.
    pub gaps: Vec<f64>,
    pub converged: bool,
    /// Half of `‖u_A − u_B‖∞` between the two path halves of the last sweep,
    /// per slice.
    pub noise_floor: Vec<f64>,
}

/// Velocity used between jumps: piecewise constant on the slices, left
/// endpoint.
#[derive(Debug, Clone)]
pub struct SliceDrift {
    pub fields: Vec<VelocityField>,
    pub width: f64,
    pub interpolation: Interpolation,
}

impl SliceDrift {
    #[inline]
    fn at(&self, r: f64, x: [f64; 2]) -> [f64; 2] {
        let k = ((r / self.width) as usize).min(self.fields.len() - 1);
        self.fields[k].evaluate(x[0], x[1], self.interpolation)
    }
}

/// Per-path streams for a grid point and slice.
fn point_stream(base: &RngStream, point: usize, slice: usize) -> RngStream {
    base.child(Label::new("point", point as u64))
        .child(Label::new("slice", slice as u64))
}

/// Endpoint `X_{s,T}` of one path, its antithetic mirror driven by `−ξ` on
/// the same clock, and the scaled jump sum `a Σ ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEnd {
    pub x: [f64; 2],
    pub mirror: Option<[f64; 2]>,
    pub noise: [f64; 2],
}

pub fn path_endpoints(
    x: [f64; 2],
    s: f64,
    config: &NseConfig,
    drift: &SliceDrift,
    law: &JumpLaw,
    path: &RngStream,
) -> PathEnd {
    let mut clock = clock_stream(path);
    let mut jumps = jump_stream(path);
    let amp = config.jump_amplitude();
    let eps = config.eps;
    let mut a = x;
    let mut b = x;
    let mut z = [0.0; 2];
    let mut noise = [0.0; 2];
    let mut r = s;
    loop {
        r += eps * clock.exponential();
        if r > config.horizon {
            break;
        }
        law.sample_into(&mut jumps, &mut z);
        noise[0] += amp * z[0];
        noise[1] += amp * z[1];
        let ua = drift.at(r, a);
        a = [a[0] + eps * ua[0] + amp * z[0], a[1] + eps * ua[1] + amp * z[1]];
        if config.antithetic {
            let ub = drift.at(r, b);
            b = [b[0] + eps * ub[0] - amp * z[0], b[1] + eps * ub[1] - amp * z[1]];
        }
    }
    PathEnd {
        x: a,
        mirror: config.antithetic.then_some(b),
        noise,
    }
}

/// Noiseless characteristic `dx/dr = u(r, x)` from `s` to `T` by RK4.
fn characteristic(x: [f64; 2], s: f64, horizon: f64, drift: &SliceDrift) -> [f64; 2] {
    let steps = ((horizon - s) / 0.01).ceil().max(1.0) as usize;
    let h = (horizon - s) / steps as f64;
    let mut y = x;
    let add = |y: [f64; 2], k: [f64; 2], c: f64| [y[0] + c * k[0], y[1] + c * k[1]];
    for n in 0..steps {
        let r = s + n as f64 * h;
        let k1 = drift.at(r, y);
        let k2 = drift.at(r + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = drift.at(r + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = drift.at(r + h, add(y, k3, h));
        for i in 0..2 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// `E f(y + aH_t)` for the trigonometric interpolant of `f` and the
/// axis-law compound Poisson process of intensity `1/ε`:
/// each mode is damped by `exp((t/ε)((cos a k₁ + cos a k₂)/2 − 1))`.
struct JumpSmoother {
    modes: Vec<(f64, f64, Complex<f64>)>,
    norm: f64,
}

impl JumpSmoother {
    fn new(f: &VorticityField) -> Self {
        let g = f.g;
        let spec = fft_for(g).forward(&f.values);
        let peak = spec.iter().fold(0.0f64, |m, c| m.max(c.norm()));
        let mut modes = Vec::new();
        for i in 0..g {
            for j in 0..g {
                let c = spec[i * g + j];
                if c.norm() > 1e-15 * peak {
                    modes.push((wavenumber_even(g, i), wavenumber_even(g, j), c));
                }
            }
        }
        Self {
            modes,
            norm: (g * g) as f64,
        }
    }

    fn expectation(&self, y: [f64; 2], t: f64, config: &NseConfig) -> f64 {
        let a = config.jump_amplitude();
        let rate = t / config.eps;
        let (y1, y2) = (y[0] + PI, y[1] + PI);
        self.modes
            .iter()
            .map(|&(k1, k2, c)| {
                let damp = (rate * (0.5 * ((a * k1).cos() + (a * k2).cos()) - 1.0)).exp();
                damp * (c * Complex::from_polar(1.0, k1 * y1 + k2 * y2)).re
            })
            .sum::<f64>()
            / self.norm
    }
}

/// One Picard sweep: `w_n(s_k, x) = E w0(X_{s_k,T}(x))` under `drift`.
///
/// Returns the full estimates and the two half-sample estimates per slice.
pub fn picard_sweep<F>(
    w0: &F,
    g: usize,
    config: &NseConfig,
    drift: &SliceDrift,
    stream: &RngStream,
) -> Result<(Vec<VorticityField>, Vec<[VorticityField; 2]>), NseError>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    check_grid(g)?;
    config.validate()?;
    let law = build_jump_law(2.0, 2, None).map_err(|e| NseError::InvalidParameter(e.to_string()))?;
    let s_grid = config.s_grid();
    let pairs = config.pairs();
    let half = pairs.div_ceil(2);
    let smoother = if config.control_variate {
        Some(JumpSmoother::new(&VorticityField::from_fn(g, w0)?))
    } else {
        None
    };
    // (point) -> per slice (sum_a, count_a, sum_b, count_b).
    let sums: Vec<Vec<[f64; 4]>> = (0..g * g)
        .into_par_iter()
        .map(|p| {
            let x = [grid_coord(g, p / g), grid_coord(g, p % g)];
            s_grid
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let ps = point_stream(stream, p, k);
                    let cv = smoother.as_ref().map(|sm| {
                        let y = characteristic(x, s, config.horizon, drift);
                        (y, sm.expectation(y, config.horizon - s, config))
                    });
                    let mut acc = [0.0; 4];
                    for m in 0..pairs {
                        let path = ps.child(Label::new("path", m as u64));
                        let end = path_endpoints(x, s, config, drift, &law, &path);
                        let mut v = w0(end.x[0], end.x[1]);
                        let mut c = 1.0;
                        if let Some((y, mean)) = cv {
                            v -= w0(y[0] + end.noise[0], y[1] + end.noise[1]) - mean;
                        }
                        if let Some(b) = end.mirror {
                            v += w0(b[0], b[1]);
                            if let Some((y, mean)) = cv {
                                v -= w0(y[0] - end.noise[0], y[1] - end.noise[1]) - mean;
                            }
                            c = 2.0;
                        }
                        let slot = if m < half { 0 } else { 2 };
                        acc[slot] += v;
                        acc[slot + 1] += c;
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let mut full = Vec::with_capacity(s_grid.len());
    let mut halves = Vec::with_capacity(s_grid.len());
    for k in 0..s_grid.len() {
        let mut all = Vec::with_capacity(g * g);
        let mut ha = Vec::with_capacity(g * g);
        let mut hb = Vec::with_capacity(g * g);
        for acc in &sums {
            let [sa, ca, sb, cb] = acc[k];
            all.push((sa + sb) / (ca + cb));
            ha.push(sa / ca);
            // A single pair leaves the second half empty.
            hb.push(if cb > 0.0 { sb / cb } else { sa / ca });
        }
        full.push(VorticityField::new(g, all)?);
        halves.push([VorticityField::new(g, ha)?, VorticityField::new(g, hb)?]);
    }
    Ok((full, halves))
}

/// Monte-Carlo Picard solver for the compound-Poisson NSE system.
///
/// Starts from `u_0 = K₂ * w0` on every slice and reuses the same path
/// streams in every sweep.
pub fn solve_nse_poisson<F>(
    w0: &F,
    g: usize,
    config: &NseConfig,
    stream: &RngStream,
) -> Result<NseSolution, NseError>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    check_grid(g)?;
    config.validate()?;
    let s_grid = config.s_grid();
    let width = config.horizon / config.slices as f64;
    let u0 = biot_savart(&VorticityField::from_fn(g, w0)?);
    let mut drift = SliceDrift {
        fields: vec![u0; config.slices],
        width,
        interpolation: config.interpolation,
    };
    let mut gaps: Vec<f64> = Vec::new();
    let mut stalled = 0;
    loop {
        let (w, halves) = picard_sweep(w0, g, config, &drift, stream)?;
        let u: Vec<VelocityField> = w.iter().map(biot_savart).collect();
        let gap = u
            .iter()
            .zip(&drift.fields)
            .fold(0.0f64, |m, (a, b)| m.max(a.sup_distance(b)));
        if let Some(&prev) = gaps.last() {
            stalled = if gap >= prev { stalled + 1 } else { 0 };
        }
        gaps.push(gap);
        log::debug!("nse sweep {}: gap {gap:.3e}", gaps.len());
        let converged = gap < config.picard_tol;
        if converged || gaps.len() >= config.max_iter {
            let noise_floor = halves
                .iter()
                .map(|[a, b]| 0.5 * biot_savart(a).sup_distance(&biot_savart(b)))
                .collect();
            return Ok(NseSolution {
                s_grid,
                w,
                u,
                gaps,
                converged,
                noise_floor,
            });
        }
        if stalled >= PICARD_PATIENCE {
            return Err(NseError::PicardStalled { gaps });
        }
        drift.fields = u;
    }
}

/// Pseudo-spectral solution of the backward vorticity equation with 2/3
/// dealiasing and integrating-factor RK4, reported at each `s` in `s_grid`.
pub fn spectral_reference<F>(
    w0: &F,
    nu: f64,
    horizon: f64,
    s_grid: &[f64],
    g: usize,
    dt: f64,
) -> Result<Vec<VorticityField>, NseError>
where
    F: Fn(f64, f64) -> f64,
{
    check_grid(g)?;
    if !(dt > 0.0) || !(nu >= 0.0) || !(horizon > 0.0) {
        return Err(NseError::InvalidParameter("dt, nu and horizon must be positive".into()));
    }
    if s_grid.iter().any(|&s| !(0.0..=horizon).contains(&s)) {
        return Err(NseError::InvalidParameter("evaluation times must lie in [0, T]".into()));
    }
    let fft = fft_for(g);
    let n = g * g;
    let dx = 2.0 * PI / g as f64;
    let cut = g as f64 / 3.0;
    let mut lap = vec![0.0; n];
    let mut keep = vec![false; n];
    for i in 0..g {
        for j in 0..g {
            let (k1, k2) = (wavenumber_even(g, i), wavenumber_even(g, j));
            lap[i * g + j] = k1 * k1 + k2 * k2;
            keep[i * g + j] = k1.abs() < cut && k2.abs() < cut;
        }
    }
    let w_init = VorticityField::from_fn(g, w0)?;
    let mut v = fft.forward(&w_init.values);
    // In τ = T − s: ∂_τ w = νΔw + u·∇w.
    let nonlinear = |v: &[Complex<f64>]| -> Result<Vec<Complex<f64>>, (f64, f64)> {
        let i_unit = Complex::new(0.0, 1.0);
        let mut a = vec![Complex::new(0.0, 0.0); n];
        let mut b = vec![Complex::new(0.0, 0.0); n];
        let mut d1 = vec![Complex::new(0.0, 0.0); n];
        let mut d2 = vec![Complex::new(0.0, 0.0); n];
        for i in 0..g {
            for j in 0..g {
                let idx = i * g + j;
                if !keep[idx] {
                    continue;
                }
                let (k1, k2) = (wavenumber(g, i), wavenumber(g, j));
                let kk = k1 * k1 + k2 * k2;
                d1[idx] = i_unit * k1 * v[idx];
                d2[idx] = i_unit * k2 * v[idx];
                if kk > 0.0 {
                    let psi = -v[idx] / kk;
                    a[idx] = -i_unit * k2 * psi;
                    b[idx] = i_unit * k1 * psi;
                }
            }
        }
        let (u1, u2) = (fft.inverse(&a), fft.inverse(&b));
        let (w1, w2) = (fft.inverse(&d1), fft.inverse(&d2));
        let umax = u1.iter().zip(&u2).fold(0.0f64, |m, (p, q)| m.max(p.abs() + q.abs()));
        let prod: Vec<f64> = (0..n).map(|k| u1[k] * w1[k] + u2[k] * w2[k]).collect();
        let mut out = fft.forward(&prod);
        for (o, &k) in out.iter_mut().zip(&keep) {
            if !k {
                *o = Complex::new(0.0, 0.0);
            }
        }
        let limit = if umax > 0.0 { dx / umax } else { f64::INFINITY };
        if dt > limit {
            return Err((dt, limit));
        }
        Ok(out)
    };
    let cfl = |(dt, limit): (f64, f64)| NseError::Cfl { dt, limit };

    // Output times in increasing τ.
    let mut order: Vec<usize> = (0..s_grid.len()).collect();
    order.sort_by(|&a, &b| s_grid[b].total_cmp(&s_grid[a]));
    let mut out: Vec<Option<VorticityField>> = vec![None; s_grid.len()];
    let mut tau = 0.0;
    for &idx in &order {
        let target = horizon - s_grid[idx];
        let span = target - tau;
        if span > 0.0 {
            let steps = (span / dt).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            let e1: Vec<f64> = lap.iter().map(|&l| (-nu * l * h).exp()).collect();
            let e2: Vec<f64> = lap.iter().map(|&l| (-nu * l * h * 0.5).exp()).collect();
            for _ in 0..steps {
                let ka = nonlinear(&v).map_err(cfl)?;
                let tmp: Vec<Complex<f64>> = (0..n).map(|k| e2[k] * (v[k] + 0.5 * h * ka[k])).collect();
                let kb = nonlinear(&tmp).map_err(cfl)?;
                let tmp: Vec<Complex<f64>> = (0..n).map(|k| e2[k] * v[k] + 0.5 * h * kb[k]).collect();
                let kc = nonlinear(&tmp).map_err(cfl)?;
                let tmp: Vec<Complex<f64>> = (0..n).map(|k| e1[k] * v[k] + h * e2[k] * kc[k]).collect();
                let kd = nonlinear(&tmp).map_err(cfl)?;
                for k in 0..n {
                    v[k] = e1[k] * v[k]
                        + h / 6.0 * (e1[k] * ka[k] + 2.0 * e2[k] * (kb[k] + kc[k]) + kd[k]);
                }
            }
            tau = target;
        }
        out[idx] = Some(VorticityField::new(g, fft.inverse(&v))?);
    }
    Ok(out.into_iter().map(|f| f.expect("every slice visited")).collect())
}

/// Taylor-Green vorticity `−2 cos x₁ cos x₂`.
pub fn taylor_green(x1: f64, x2: f64) -> f64 {
    -2.0 * x1.cos() * x2.cos()
}

/// Exact backward solution from Taylor-Green data: `e^{−2ν(T−s)} w0`.
pub fn taylor_green_exact(nu: f64, horizon: f64, s: f64, g: usize) -> Result<VorticityField, NseError> {
    let f = (-2.0 * nu * (horizon - s)).exp();
    VorticityField::from_fn(g, |a, b| f * taylor_green(a, b))
}
