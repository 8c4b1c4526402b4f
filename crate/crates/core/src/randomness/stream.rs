//! Label-addressed random streams.
//!
//! Every stream is keyed by `(root_seed, labels)`. The key is folded through
//! a SplitMix64-style mixer into a 256-bit ChaCha8 key, so sibling streams
//! never share state and a stream can be rebuilt anywhere from its address.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::RandomnessError;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a role name; roles are short static strings.
fn role_hash(role: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// One component of a stream address, e.g. `("replica", 3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Label {
    pub role: &'static str,
    pub index: u64,
}

impl Label {
    pub const fn new(role: &'static str, index: u64) -> Self {
        Self { role, index }
    }

    pub const fn replica(index: u64) -> Self {
        Self::new("replica", index)
    }

    pub const fn particle(index: u64) -> Self {
        Self::new("particle", index)
    }

    pub const fn purpose(role: &'static str) -> Self {
        Self::new(role, 0)
    }
}

/// Running digest of a label path. Cheap to copy; extending it is a pure
/// function of the previous digest and the new label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Address {
    root_seed: u64,
    digest: u64,
    depth: u32,
}

impl Address {
    fn root(root_seed: u64) -> Self {
        Self {
            root_seed,
            digest: mix64(root_seed ^ GOLDEN),
            depth: 0,
        }
    }

    fn extend(self, label: Label) -> Self {
        let mut d = mix64(self.digest ^ role_hash(label.role));
        d = mix64(d.wrapping_add(GOLDEN) ^ label.index);
        Self {
            root_seed: self.root_seed,
            digest: d,
            depth: self.depth + 1,
        }
    }

    fn key(self) -> [u8; 32] {
        let mut key = [0u8; 32];
        let mut s = self.digest ^ (u64::from(self.depth) << 56);
        for chunk in key.chunks_exact_mut(8) {
            s = s.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(s ^ self.root_seed.rotate_left(17)).to_le_bytes());
        }
        key
    }
}

/// A single-owner random stream addressed by `(root_seed, labels)`.
///
/// Streams are not shared between tasks; parallel work derives disjoint
/// children with [`RngStream::child`].
#[derive(Debug, Clone)]
pub struct RngStream {
    address: Address,
    rng: ChaCha8Rng,
}

/// Derive the stream addressed by `labels` under `root_seed`.
pub fn derive_stream(root_seed: u64, labels: &[Label]) -> Result<RngStream, RandomnessError> {
    if labels.is_empty() {
        return Err(RandomnessError::EmptyLabels);
    }
    let address = labels
        .iter()
        .fold(Address::root(root_seed), |a, &l| a.extend(l));
    Ok(RngStream::at(address))
}

impl RngStream {
    fn at(address: Address) -> Self {
        Self {
            address,
            rng: ChaCha8Rng::from_seed(address.key()),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.address.root_seed
    }

    /// Number of labels in this stream's address.
    pub fn depth(&self) -> u32 {
        self.address.depth
    }

    /// The sub-stream whose address is this one's plus `label`.
    ///
    /// Depends only on the address, never on how many draws were taken.
    pub fn child(&self, label: Label) -> RngStream {
        Self::at(self.address.extend(label))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exp(1) draw by inversion.
    #[inline]
    pub fn exponential(&mut self) -> f64 {
        exponential_from_uniform(self.uniform())
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2^-32 for the
    /// table sizes used here).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal by Box-Muller (one value per call; the partner is
    /// discarded so draws stay aligned with call counts).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Inverse CDF of Exp(1) on the half-open convention `u ∈ [0,1)`.
#[inline]
pub fn exponential_from_uniform(u: f64) -> f64 {
    -(-u).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_draws() {
        let labels = [Label::replica(4), Label::purpose("clock")];
        let mut a = derive_stream(7, &labels).unwrap();
        let mut b = derive_stream(7, &labels).unwrap();
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn child_is_independent_of_draw_position() {
        let mut s = derive_stream(1, &[Label::replica(0)]).unwrap();
        let c1 = s.child(Label::particle(2)).next_u64();
        for _ in 0..10 {
            s.next_u64();
        }
        let c2 = s.child(Label::particle(2)).next_u64();
        let direct = derive_stream(1, &[Label::replica(0), Label::particle(2)])
            .unwrap()
            .next_u64();
        assert_eq!(c1, c2);
        assert_eq!(c1, direct);
    }

    #[test]
    fn empty_labels_rejected() {
        assert!(matches!(
            derive_stream(3, &[]),
            Err(RandomnessError::EmptyLabels)
        ));
    }

    #[test]
    fn label_order_matters() {
        let mut a = derive_stream(9, &[Label::replica(0), Label::particle(1)]).unwrap();
        let mut b = derive_stream(9, &[Label::particle(1), Label::replica(0)]).unwrap();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let mut a = derive_stream(11, &[Label::replica(0)]).unwrap();
        let mut b = derive_stream(11, &[Label::replica(1)]).unwrap();
        let n = 100_000;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.uniform();
            let y = b.uniform();
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let va = saa / nf - (sa / nf).powi(2);
        let vb = sbb / nf - (sb / nf).powi(2);
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.02, "rho = {rho}");
    }

    #[test]
    fn exponential_inverse_cdf() {
        assert!((exponential_from_uniform(0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(exponential_from_uniform(0.0), 0.0);
    }

    #[test]
    fn exponential_mean() {
        let mut s = derive_stream(5, &[Label::purpose("exp")]).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| s.exponential()).sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean = {mean}");
    }

    #[test]
    fn uniform_range() {
        let mut s = derive_stream(5, &[Label::purpose("u")]).unwrap();
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
