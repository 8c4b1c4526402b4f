//! Symmetric lattice jump laws and their alias-table samplers.
//!
//! Atoms are grouped into radial shells (all lattice points of equal norm
//! carry equal mass). Sampling draws a shell from a Vose alias table and then
//! a point uniformly inside the shell. Points are stored in `(z, -z)` pairs so
//! that symmetry and the zero first moment hold exactly.

use std::f64::consts::PI;

use super::{RandomnessError, RngStream};

/// Target accuracy of the normaliser `c0` for truncated stable laws.
pub const DEFAULT_NORMALIZATION_TOLERANCE: f64 = 1e-10;
/// Atom budget used to pick the default cutoff.
pub const DEFAULT_ATOM_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum JumpLawKind {
    /// Uniform on the `2d` unit axis vectors (the `α = 2` law).
    AxisUniform,
    /// `c0 |z|^{-d-α}` on `0 < |z| ≤ cutoff`.
    LatticeStable { cutoff: f64 },
    /// User-supplied symmetric table.
    Table,
}

/// Vose alias table.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Build from nonnegative weights (need not be normalised).
    pub fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        assert!(n > 0 && n <= u32::MAX as usize, "alias table size out of range");
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let mut small = Vec::with_capacity(n);
        let mut large = Vec::with_capacity(n);
        for (i, &p) in scaled.iter().enumerate() {
            if p < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are numerically 1.
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Self { prob, alias }
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let i = rng.below(self.prob.len());
        if rng.uniform() < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}

/// A discrete symmetric law on `Z^d`.
#[derive(Debug, Clone)]
pub struct JumpLaw {
    kind: JumpLawKind,
    dim: usize,
    alpha: f64,
    c0: f64,
    declared_rates: Option<(f64, f64)>,
    /// Probability of each shell (sums to one).
    shell_prob: Vec<f64>,
    /// `shell_start[s]..shell_start[s+1]` indexes `points` (in units of points).
    shell_start: Vec<usize>,
    points: Vec<i32>,
    alias: AliasTable,
    omitted_mass: f64,
    normalization_error: f64,
}

impl JumpLaw {
    /// Uniform law on `{±e_i}`.
    pub fn axis_uniform(dim: usize) -> Result<Self, RandomnessError> {
        if dim == 0 {
            return Err(RandomnessError::InvalidDimension(dim));
        }
        let mut points = Vec::with_capacity(2 * dim * dim);
        for i in 0..dim {
            for sign in [1, -1] {
                let mut z = vec![0i32; dim];
                z[i] = sign;
                points.extend_from_slice(&z);
            }
        }
        Ok(Self::from_shells(
            JumpLawKind::AxisUniform,
            dim,
            2.0,
            1.0 / (2 * dim) as f64,
            None,
            vec![1.0],
            vec![0, 2 * dim],
            points,
            0.0,
            0.0,
        ))
    }

    /// `c0 |z|^{-d-α}` truncated at `cutoff` (radius). `None` picks a
    /// cutoff of `10^6` for `d = 1` and roughly `10^6` atoms otherwise.
    pub fn lattice_stable(
        alpha: f64,
        dim: usize,
        cutoff: Option<f64>,
        tolerance: f64,
    ) -> Result<Self, RandomnessError> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(RandomnessError::InvalidAlpha(alpha));
        }
        if dim == 0 {
            return Err(RandomnessError::InvalidDimension(dim));
        }
        let cutoff = match cutoff {
            Some(r) if r >= 1.0 => r,
            Some(r) => return Err(RandomnessError::CutoffTooSmall { cutoff: r }),
            None => default_cutoff(dim),
        };
        let s = dim as f64 + alpha;
        let shells = enumerate_shells(dim, cutoff);

        // Lattice sum inside the cutoff, smallest terms first.
        let partial: f64 = shells
            .iter()
            .rev()
            .map(|sh| sh.count as f64 * (sh.norm_sq as f64).powf(-0.5 * s))
            .sum();
        let (tail, bound) = tail_estimate(dim, alpha, cutoff, &shells);
        let total = partial + tail;
        let c0 = 1.0 / total;
        let rel_bound = bound / total;
        if rel_bound > tolerance {
            return Err(RandomnessError::NormalizationUnreachable {
                achieved: rel_bound,
                tolerance,
            });
        }
        let omitted_mass = tail / total;

        let mut shell_prob = Vec::with_capacity(shells.len());
        let mut shell_start = Vec::with_capacity(shells.len() + 1);
        let mut points = Vec::new();
        shell_start.push(0);
        for sh in &shells {
            shell_prob.push(sh.count as f64 * (sh.norm_sq as f64).powf(-0.5 * s));
            points.extend_from_slice(&sh.points);
            shell_start.push(points.len() / dim);
        }
        let mass: f64 = shell_prob.iter().rev().sum();
        for p in &mut shell_prob {
            *p /= mass;
        }
        Ok(Self::from_shells(
            JumpLawKind::LatticeStable { cutoff },
            dim,
            alpha,
            c0,
            Some((1.0, 1.0 - alpha / 2.0)),
            shell_prob,
            shell_start,
            points,
            omitted_mass,
            rel_bound,
        ))
    }

    /// Law given by explicit atoms (flat, `dim` coordinates each) and
    /// probabilities. The table must be exactly symmetric.
    pub fn table(dim: usize, atoms: &[i32], probs: &[f64]) -> Result<Self, RandomnessError> {
        if dim == 0 {
            return Err(RandomnessError::InvalidDimension(dim));
        }
        if atoms.len() != dim * probs.len() || probs.is_empty() {
            return Err(RandomnessError::MalformedTable(
                "atom/probability length mismatch".into(),
            ));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(RandomnessError::MalformedTable("negative probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(RandomnessError::MalformedTable(format!(
                "probabilities sum to {total}"
            )));
        }
        let n = probs.len();
        let mut used = vec![false; n];
        let mut shell_prob = Vec::new();
        let mut shell_start = vec![0];
        let mut points = Vec::new();
        for i in 0..n {
            if used[i] {
                continue;
            }
            let z = &atoms[i * dim..(i + 1) * dim];
            used[i] = true;
            if z.iter().all(|&c| c == 0) {
                points.extend_from_slice(z);
                shell_prob.push(probs[i]);
                shell_start.push(points.len() / dim);
                continue;
            }
            let neg: Vec<i32> = z.iter().map(|c| -c).collect();
            let j = (0..n)
                .find(|&j| !used[j] && atoms[j * dim..(j + 1) * dim] == neg[..])
                .ok_or_else(|| {
                    RandomnessError::MalformedTable(format!("atom {z:?} has no mirror"))
                })?;
            if probs[i] != probs[j] {
                return Err(RandomnessError::MalformedTable(format!(
                    "atom {z:?} is not symmetric"
                )));
            }
            used[j] = true;
            points.extend_from_slice(z);
            points.extend_from_slice(&neg);
            shell_prob.push(2.0 * probs[i]);
            shell_start.push(points.len() / dim);
        }
        Ok(Self::from_shells(
            JumpLawKind::Table,
            dim,
            2.0,
            f64::NAN,
            None,
            shell_prob,
            shell_start,
            points,
            0.0,
            0.0,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_shells(
        kind: JumpLawKind,
        dim: usize,
        alpha: f64,
        c0: f64,
        declared_rates: Option<(f64, f64)>,
        shell_prob: Vec<f64>,
        shell_start: Vec<usize>,
        points: Vec<i32>,
        omitted_mass: f64,
        normalization_error: f64,
    ) -> Self {
        let alias = AliasTable::new(&shell_prob);
        Self {
            kind,
            dim,
            alpha,
            c0,
            declared_rates,
            shell_prob,
            shell_start,
            points,
            alias,
            omitted_mass,
            normalization_error,
        }
    }

    pub fn kind(&self) -> &JumpLawKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Normaliser of the untruncated law (`NaN` for tables).
    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Declared `(β0, β1)` rate metadata, when known for the family.
    pub fn declared_rates(&self) -> Option<(f64, f64)> {
        self.declared_rates
    }

    pub fn with_declared_rates(mut self, beta0: f64, beta1: f64) -> Self {
        self.declared_rates = Some((beta0, beta1));
        self
    }

    /// Nominal mass beyond the cutoff (folded into the renormalised atoms).
    pub fn omitted_mass(&self) -> f64 {
        self.omitted_mass
    }

    /// Estimated relative error of `c0`.
    pub fn normalization_error(&self) -> f64 {
        self.normalization_error
    }

    pub fn atom_count(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn shell_count(&self) -> usize {
        self.shell_prob.len()
    }

    /// Sampling probability of a single atom in shell `s`.
    fn atom_prob(&self, s: usize) -> f64 {
        self.shell_prob[s] / (self.shell_start[s + 1] - self.shell_start[s]) as f64
    }

    /// Iterate `(atom, probability)` in storage order (mirror pairs adjacent).
    pub fn atoms(&self) -> impl Iterator<Item = (&[i32], f64)> + '_ {
        (0..self.shell_count()).flat_map(move |s| {
            let p = self.atom_prob(s);
            (self.shell_start[s]..self.shell_start[s + 1])
                .map(move |k| (&self.points[k * self.dim..(k + 1) * self.dim], p))
        })
    }

    /// Probability of the atom `z` under the sampling law.
    pub fn prob_of(&self, z: &[i32]) -> f64 {
        self.atoms().find(|(a, _)| *a == z).map_or(0.0, |(_, p)| p)
    }

    /// Nominal mass `c0 |z|^{-d-α}` (stable laws) or table mass.
    pub fn nominal_mass(&self, z: &[i32]) -> f64 {
        match self.kind {
            JumpLawKind::LatticeStable { .. } => {
                let n2: i64 = z.iter().map(|&c| i64::from(c) * i64::from(c)).sum();
                if n2 == 0 {
                    0.0
                } else {
                    self.c0 * (n2 as f64).powf(-0.5 * (self.dim as f64 + self.alpha))
                }
            }
            _ => self.prob_of(z),
        }
    }

    /// Total sampling probability, summed smallest-first.
    pub fn total_probability(&self) -> f64 {
        let mut ps: Vec<f64> = self.atoms().map(|(_, p)| p).collect();
        ps.sort_by(f64::total_cmp);
        ps.iter().sum()
    }

    /// First moment, accumulated over mirror pairs so it vanishes exactly.
    pub fn first_moment(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        let atoms: Vec<(&[i32], f64)> = self.atoms().collect();
        let mut i = 0;
        while i < atoms.len() {
            let (z, p) = atoms[i];
            if z.iter().all(|&c| c == 0) {
                i += 1;
                continue;
            }
            let (w, q) = atoms[i + 1];
            for k in 0..self.dim {
                m[k] += p * f64::from(z[k]) + q * f64::from(w[k]);
            }
            i += 2;
        }
        m
    }

    /// Second moment matrix `E ξ ξ^T` (row-major).
    pub fn second_moment(&self) -> Vec<f64> {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for (z, p) in self.atoms() {
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += p * f64::from(z[a]) * f64::from(z[b]);
                }
            }
        }
        m
    }

    /// Tail `P(|ξ| ≥ r)` under the sampling law.
    pub fn tail_probability(&self, r: f64) -> f64 {
        let r2 = r * r;
        let mut acc = 0.0;
        for s in (0..self.shell_count()).rev() {
            let k = self.shell_start[s];
            let z = &self.points[k * self.dim..(k + 1) * self.dim];
            let n2: f64 = z.iter().map(|&c| f64::from(c) * f64::from(c)).sum();
            if n2 >= r2 {
                acc += self.shell_prob[s];
            }
        }
        acc
    }

    /// Index of a sampled atom.
    #[inline]
    pub fn sample_index(&self, rng: &mut RngStream) -> usize {
        let s = if self.shell_prob.len() == 1 {
            0
        } else {
            self.alias.sample(rng)
        };
        let lo = self.shell_start[s];
        let width = self.shell_start[s + 1] - lo;
        if width == 1 {
            lo
        } else {
            lo + rng.below(width)
        }
    }

    #[inline]
    pub fn atom(&self, index: usize) -> &[i32] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    /// Draw one jump as a lattice vector.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<i32> {
        self.atom(self.sample_index(rng)).to_vec()
    }

    /// Draw one jump into a real buffer of length `dim`.
    #[inline]
    pub fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        let z = self.atom(self.sample_index(rng));
        for (o, &c) in out.iter_mut().zip(z) {
            *o = f64::from(c);
        }
    }
}

/// Dispatch on `α`: the axis law at `α = 2`, the truncated stable law below.
pub fn build_jump_law(alpha: f64, dim: usize, cutoff: Option<f64>) -> Result<JumpLaw, RandomnessError> {
    if alpha == 2.0 {
        JumpLaw::axis_uniform(dim)
    } else if alpha > 0.0 && alpha < 2.0 {
        JumpLaw::lattice_stable(alpha, dim, cutoff, DEFAULT_NORMALIZATION_TOLERANCE)
    } else {
        Err(RandomnessError::InvalidAlpha(alpha))
    }
}

struct Shell {
    norm_sq: i64,
    count: usize,
    points: Vec<i32>,
}

fn unit_ball_volume(dim: usize) -> f64 {
    let d = dim as f64;
    PI.powf(d / 2.0) / statrs::function::gamma::gamma(d / 2.0 + 1.0)
}

fn sphere_area(dim: usize) -> f64 {
    dim as f64 * unit_ball_volume(dim)
}

fn default_cutoff(dim: usize) -> f64 {
    if dim == 1 {
        DEFAULT_ATOM_BUDGET as f64
    } else {
        (DEFAULT_ATOM_BUDGET as f64 / unit_ball_volume(dim))
            .powf(1.0 / dim as f64)
            .floor()
    }
}

/// All nonzero lattice points with `|z| ≤ cutoff`, grouped by `|z|^2` and
/// stored as mirror pairs.
fn enumerate_shells(dim: usize, cutoff: f64) -> Vec<Shell> {
    let r = cutoff.floor() as i64;
    let r2 = (cutoff * cutoff).floor() as i64;
    if dim == 1 {
        return (1..=r)
            .map(|k| Shell {
                norm_sq: k * k,
                count: 2,
                points: vec![k as i32, -(k as i32)],
            })
            .collect();
    }
    let mut by_norm: std::collections::BTreeMap<i64, Vec<i32>> = Default::default();
    let mut z = vec![-r; dim];
    loop {
        let n2: i64 = z.iter().map(|c| c * c).sum();
        // Keep the representative whose first nonzero coordinate is positive.
        let first = z.iter().find(|&&c| c != 0).copied().unwrap_or(0);
        if n2 > 0 && n2 <= r2 && first > 0 {
            let entry = by_norm.entry(n2).or_default();
            entry.extend(z.iter().map(|&c| c as i32));
            entry.extend(z.iter().map(|&c| -c as i32));
        }
        // Odometer increment.
        let mut k = 0;
        loop {
            if k == dim {
                return by_norm
                    .into_iter()
                    .map(|(norm_sq, points)| Shell {
                        norm_sq,
                        count: points.len() / dim,
                        points,
                    })
                    .collect();
            }
            z[k] += 1;
            if z[k] > r {
                z[k] = -r;
                k += 1;
            } else {
                break;
            }
        }
    }
}

/// Estimate of `Σ_{|z| > cutoff} |z|^{-d-α}` and an accuracy bound.
fn tail_estimate(dim: usize, alpha: f64, cutoff: f64, shells: &[Shell]) -> (f64, f64) {
    let s = dim as f64 + alpha;
    if dim == 1 {
        // Euler-Maclaurin for 2 Σ_{k>R} k^{-s}.
        let r = cutoff.floor();
        let f = r.powf(-s);
        let integral = r.powf(1.0 - s) / (s - 1.0);
        let d1 = s * r.powf(-s - 1.0) / 12.0;
        let d3 = s * (s + 1.0) * (s + 2.0) * r.powf(-s - 3.0) / 720.0;
        let next = s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) * r.powf(-s - 5.0) / 30240.0;
        let tail = integral - 0.5 * f + d1 - d3;
        // Summation rounding of ~R terms adds a relative 1e-16 per term.
        let rounding = 1e-16 * (r.ln() + 1.0);
        return (2.0 * tail, 2.0 * next + rounding);
    }
    // Replace the lattice tail by the integral outside the ball whose volume
    // equals the number of enclosed lattice sites (origin included).
    let tail_at = |upto: usize| -> f64 {
        let count: usize = 1 + shells[..upto].iter().map(|sh| sh.count).sum::<usize>();
        let rho = (count as f64 / unit_ball_volume(dim)).powf(1.0 / dim as f64);
        sphere_area(dim) * rho.powf(-alpha) / alpha
    };
    let n = shells.len();
    let tail = tail_at(n);
    // Accuracy: disagreement with the same estimate made at half the radius.
    let half = shells.partition_point(|sh| (sh.norm_sq as f64) <= 0.25 * cutoff * cutoff);
    let partial_half: f64 = shells[half..]
        .iter()
        .rev()
        .map(|sh| sh.count as f64 * (sh.norm_sq as f64).powf(-0.5 * s))
        .sum();
    let bound = (tail_at(half) - (partial_half + tail)).abs();
    (tail, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::{derive_stream, Label};

    fn stream(tag: &'static str) -> RngStream {
        derive_stream(2024, &[Label::purpose(tag)]).unwrap()
    }

    #[test]
    fn axis_law_atoms() {
        let law = build_jump_law(2.0, 1, None).unwrap();
        assert_eq!(law.atom_count(), 2);
        assert_eq!(law.prob_of(&[1]), 0.5);
        assert_eq!(law.prob_of(&[-1]), 0.5);
        let law3 = build_jump_law(2.0, 3, None).unwrap();
        assert_eq!(law3.atom_count(), 6);
        for (z, p) in law3.atoms() {
            assert_eq!(z.iter().map(|c| c.abs()).sum::<i32>(), 1);
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cauchy_lattice_normaliser() {
        // Σ_{k≠0} |k|^{-2} = 2ζ(2) = π²/3.
        let law = build_jump_law(1.0, 1, Some(1e6)).unwrap();
        let expect = 3.0 / (PI * PI);
        assert!((law.c0() - expect).abs() < 1e-12, "c0 = {}", law.c0());
        assert!((law.nominal_mass(&[1]) - expect).abs() < 1e-12);
        assert!((law.nominal_mass(&[-1]) - expect).abs() < 1e-12);
        assert!(law.normalization_error() < 1e-10);
    }

    #[test]
    fn normalisation_and_symmetry() {
        for law in [
            build_jump_law(1.5, 1, Some(1e4)).unwrap(),
            build_jump_law(2.0, 2, None).unwrap(),
            JumpLaw::lattice_stable(1.2, 2, Some(60.0), 1.0).unwrap(),
        ] {
            assert!((law.total_probability() - 1.0).abs() < 1e-12);
            for (z, p) in law.atoms() {
                let neg: Vec<i32> = z.iter().map(|c| -c).collect();
                assert_eq!(law.prob_of(&neg), p);
            }
            assert!(law.first_moment().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn two_dim_stable_reports_unreachable_accuracy() {
        let err = JumpLaw::lattice_stable(1.5, 2, Some(30.0), 1e-10).unwrap_err();
        assert!(matches!(err, RandomnessError::NormalizationUnreachable { achieved, .. } if achieved > 1e-10));
    }

    #[test]
    fn invalid_parameters() {
        assert!(build_jump_law(0.0, 1, None).is_err());
        assert!(build_jump_law(2.5, 1, None).is_err());
        assert!(build_jump_law(1.0, 0, None).is_err());
        assert!(matches!(
            build_jump_law(1.0, 1, Some(0.5)),
            Err(RandomnessError::CutoffTooSmall { .. })
        ));
    }

    #[test]
    fn axis_frequencies() {
        let law = build_jump_law(2.0, 2, None).unwrap();
        let mut rng = stream("axis2");
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[law.sample_index(&mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "freq {f}");
        }
    }

    #[test]
    fn sample_mean_is_centred() {
        let laws = [
            build_jump_law(2.0, 2, None).unwrap(),
            build_jump_law(1.5, 1, Some(1e4)).unwrap(),
        ];
        for law in laws {
            let mut rng = stream("mean");
            let n = 100_000;
            let d = law.dim();
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            let mut buf = vec![0.0; d];
            for _ in 0..n {
                law.sample_into(&mut rng, &mut buf);
                for k in 0..d {
                    sum[k] += buf[k];
                    sq[k] += buf[k] * buf[k];
                }
            }
            for k in 0..d {
                let mean = sum[k] / n as f64;
                let sd = (sq[k] / n as f64 - mean * mean).sqrt();
                assert!(mean.abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
            }
        }
    }

    #[test]
    fn stable_tail_frequencies() {
        let law = build_jump_law(1.5, 1, None).unwrap();
        let mut rng = stream("tail");
        let n = 100_000;
        let draws: Vec<i32> = (0..n).map(|_| law.sample(&mut rng)[0]).collect();
        for k in [2i64, 5, 10] {
            let emp = draws.iter().filter(|&&z| i64::from(z.abs()) >= k).count() as f64 / n as f64;
            // c0 Σ_{|j|≥k} |j|^{-2.5} by direct summation plus an integral tail.
            let m = 2_000_000i64;
            let direct: f64 = (k..=m).rev().map(|j| (j as f64).powf(-2.5)).sum();
            let exact = 2.0 * law.c0() * (direct + (m as f64).powf(-1.5) / 1.5);
            let ratio = emp / exact;
            assert!((0.8..=1.2).contains(&ratio), "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn table_law_requires_symmetry() {
        let ok = JumpLaw::table(1, &[2, -2, 0], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(ok.prob_of(&[0]), 0.5);
        assert!(JumpLaw::table(1, &[2, -2], &[0.4, 0.6]).is_err());
        assert!(JumpLaw::table(1, &[2, 3], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn alias_table_matches_weights() {
        let w = [1.0, 3.0, 0.5, 5.5];
        let table = AliasTable::new(&w);
        let mut rng = stream("alias");
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[table.sample(&mut rng)] += 1;
        }
        for i in 0..4 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - w[i] / 10.0).abs() < 0.005);
        }
    }
}
