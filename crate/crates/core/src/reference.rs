//! Deterministic oracles: RK4, mollified Filippov solutions, OU moments.
//!
//! Nothing here touches random streams or scheme state.

use std::sync::Arc;

/// Closed-form trajectory `t ↦ x(t)`.
pub type ClosedForm = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// Mollified drift `(t, x, δ) ↦ (b * ρ_δ)(t, x)`.
pub type MollifiedDrift = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;

pub const DEFAULT_DELTA_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ReferenceError {
    #[error("reference solution diverged at t = {time}")]
    Divergence { time: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMethod {
    Rk4,
    Mollified,
    ClosedForm,
}

impl ReferenceMethod {
    pub fn tag(self) -> &'static str {
        match self {
            ReferenceMethod::Rk4 => "rk4",
            ReferenceMethod::Mollified => "mollified",
            ReferenceMethod::ClosedForm => "closed_form",
        }
    }
}

/// Deterministic trajectory on a grid with dense output.
#[derive(Clone)]
pub struct ReferencePath {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    /// `b(t_k, x_k)` at the nodes, for cubic Hermite interpolation.
    slopes: Vec<f64>,
    closed: Option<ClosedForm>,
    method: ReferenceMethod,
    accuracy: f64,
    converged: bool,
}

impl std::fmt::Debug for ReferencePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReferencePath")
            .field("dim", &self.dim)
            .field("nodes", &self.times.len())
            .field("method", &self.method)
            .field("accuracy", &self.accuracy)
            .finish()
    }
}

impl ReferencePath {
    /// Wrap a closed form, sampled on `n + 1` uniform nodes of `[0, horizon]`.
    pub fn closed_form(dim: usize, horizon: f64, n: usize, x: ClosedForm) -> Self {
        let n = n.max(1);
        let times: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        let mut states = vec![0.0; times.len() * dim];
        for (k, &t) in times.iter().enumerate() {
            x(t, &mut states[k * dim..(k + 1) * dim]);
        }
        Self {
            dim,
            slopes: vec![0.0; states.len()],
            times,
            states,
            closed: Some(x),
            method: ReferenceMethod::ClosedForm,
            accuracy: 0.0,
            converged: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn method(&self) -> ReferenceMethod {
        self.method
    }

    /// Estimated sup-norm error of the path.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    /// False when a mollification sweep failed to show decreasing gaps.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.times.len() - 1)
    }

    /// Value at `t`, clamped to the grid; cubic Hermite between RK4 nodes.
    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) {
        if let Some(x) = &self.closed {
            x(t, out);
            return;
        }
        let d = self.dim;
        let n = self.times.len();
        if t <= self.times[0] {
            out.copy_from_slice(self.node(0));
            return;
        }
        if t >= self.times[n - 1] {
            out.copy_from_slice(self.node(n - 1));
            return;
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        for i in 0..d {
            let y0 = self.states[k * d + i];
            let y1 = self.states[(k + 1) * d + i];
            let m0 = self.slopes[k * d + i];
            let m1 = self.slopes[(k + 1) * d + i];
            out[i] = y0 + h01 * (y1 - y0) + h * (h10 * m0 + h11 * m1);
        }
    }

    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out);
        out
    }
}

fn rk4_grid<F>(
    b: &F,
    x0: &[f64],
    horizon: f64,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ReferenceError>
where
    F: Fn(f64, &[f64], &mut [f64]) + ?Sized,
{
    let d = x0.len();
    let steps = (horizon / h).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * d);
    let mut slopes = Vec::with_capacity((steps + 1) * d);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    b(0.0, &x, &mut k1);
    times.push(0.0);
    states.extend_from_slice(&x);
    slopes.extend_from_slice(&k1);
    for n in 0..steps {
        let t = n as f64 * h;
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        b(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        b(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        b(t + h, &tmp, &mut k4);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t_next = if n + 1 == steps { horizon } else { (n + 1) as f64 * h };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ReferenceError::Divergence { time: t_next });
        }
        b(t_next, &x, &mut k1);
        times.push(t_next);
        states.extend_from_slice(&x);
        slopes.extend_from_slice(&k1);
    }
    Ok((times, states, slopes))
}

/// Classical RK4 with step `h` (rounded down to divide `horizon`). The
/// accuracy is the step-doubling estimate `|x_h(T) − x_{2h}(T)| / 15`.
pub fn rk4_solve<F>(b: F, x0: &[f64], horizon: f64, h: f64) -> Result<ReferencePath, ReferenceError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if !(h > 0.0) || !(horizon > 0.0) {
        return Err(ReferenceError::InvalidParameter(format!(
            "step {h} and horizon {horizon} must be positive"
        )));
    }
    let (times, states, slopes) = rk4_grid(&b, x0, horizon, h)?;
    let steps = times.len() - 1;
    let accuracy = if steps >= 2 && steps % 2 == 0 {
        let (_, coarse, _) = rk4_grid(&b, x0, horizon, 2.0 * horizon / steps as f64)?;
        let d = x0.len();
        let fine_end = &states[states.len() - d..];
        let coarse_end = &coarse[coarse.len() - d..];
        fine_end
            .iter()
            .zip(coarse_end)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max)
            / 15.0
    } else {
        f64::NAN
    };
    Ok(ReferencePath {
        dim: x0.len(),
        times,
        states,
        slopes,
        closed: None,
        method: ReferenceMethod::Rk4,
        accuracy,
        converged: true,
    })
}

/// Nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`, by Gauss-Hermite.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal Hermite recurrence (physicists'
    // weight e^{-x²}); initial guesses from the asymptotic root spacing.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = (j + 1) as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let s = std::f64::consts::SQRT_2;
    let norm = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * s).collect();
    let weights = w.iter().map(|v| v / norm).collect();
    (nodes, weights)
}

/// Gaussian mollification `b_δ(t, x) = E b(t, x + δ Z)` by tensor
/// Gauss-Hermite quadrature (64 nodes in 1-D, 16 per axis otherwise).
pub fn mollify<F>(b: F, dim: usize) -> impl Fn(f64, &[f64], f64, &mut [f64])
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let per_axis = if dim == 1 { 64 } else { 16 };
    let (nodes, weights) = gauss_hermite_normal(per_axis);
    move |t, x, delta, out| {
        out.fill(0.0);
        let mut y = vec![0.0; dim];
        let mut bv = vec![0.0; dim];
        let total = per_axis.pow(dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for k in 0..dim {
                let j = rem % per_axis;
                rem /= per_axis;
                y[k] = x[k] + delta * nodes[j];
                w *= weights[j];
            }
            b(t, &y, &mut bv);
            for k in 0..dim {
                out[k] += w * bv[k];
            }
        }
    }
}

/// Filippov solution of `x' = b(t, x)` for a one-sided Lipschitz drift.
///
/// With `closed` set the closed form is returned directly. Otherwise each δ
/// of `delta_grid` (decreasing) is solved by RK4 on the mollified drift;
/// the finest path is returned and the sup-gap between the last two paths
/// is reported as its accuracy.
pub fn filippov_solve(
    mollified: &MollifiedDrift,
    x0: &[f64],
    horizon: f64,
    h: f64,
    delta_grid: &[f64],
    closed: Option<ClosedForm>,
) -> Result<ReferencePath, ReferenceError> {
    if let Some(x) = closed {
        let n = (horizon / h).ceil().max(1.0) as usize;
        return Ok(ReferencePath::closed_form(x0.len(), horizon, n.min(100_000), x));
    }
    if delta_grid.is_empty() || delta_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ReferenceError::InvalidParameter(
            "delta grid must be nonempty and decreasing".into(),
        ));
    }
    let mut paths = Vec::with_capacity(delta_grid.len());
    for &delta in delta_grid {
        let m = mollified.clone();
        let p = rk4_solve(move |t, x, out| m(t, x, delta, out), x0, horizon, h)?;
        paths.push(p);
    }
    let gaps: Vec<f64> = paths
        .windows(2)
        .map(|w| {
            w[0].states
                .iter()
                .zip(&w[1].states)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let converged = gaps.windows(2).all(|g| g[1] < g[0]);
    if !converged {
        log::warn!("mollified Filippov gaps are not decreasing: {gaps:?}");
    }
    let mut finest = paths.pop().unwrap();
    finest.method = ReferenceMethod::Mollified;
    finest.accuracy = gaps.last().copied().unwrap_or(f64::NAN);
    finest.converged = converged;
    Ok(finest)
}

/// Mean and variance of `dX = −θ X dt + σ dW` at time `t` from `x0`.
pub fn ou_exact(theta: f64, sigma: f64, x0: f64, t: f64) -> (f64, f64) {
    assert!(theta > 0.0, "mean reversion rate must be positive");
    let mean = (-theta * t).exp() * x0;
    let var = sigma * sigma * (-(-2.0 * theta * t).exp_m1()) / (2.0 * theta);
    (mean, var)
}
