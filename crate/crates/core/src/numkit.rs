//! Small numeric kernel shared by every other module: dense `f64` parameter
//! vectors, counter-derived random streams, and a central finite-difference
//! probe used as the gradient oracle in tests.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense parameter vector. Entries are finite by construction; operations
/// panic on dimension mismatch (programming error, not a runtime condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps a value buffer. Panics if any entry is NaN or infinite.
    pub fn new(values: Vec<f64>) -> Self {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "ParamVector entries must be finite"
        );
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn assert_same_dim(&self, other: &Self) {
        assert_eq!(
            self.values.len(),
            other.values.len(),
            "parameter dimension mismatch"
        );
    }

    /// self += a * x
    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.assert_same_dim(x);
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
        debug_assert!(self.is_finite());
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
        debug_assert!(self.is_finite());
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.assert_same_dim(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Euclidean distance ‖self − other‖₂.
    pub fn distance(&self, other: &Self) -> f64 {
        self.assert_same_dim(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Unweighted mean of a nonempty slice of equal-dimension vectors,
    /// accumulated in slice order.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors.first().ok_or(Error::EmptyInput("mean of zero vectors"))?;
        let mut acc = ParamVector::zeros(first.dim());
        for v in vectors {
            acc.axpy(1.0, v);
        }
        acc.scale(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

/// Relative error comparator used throughout the test oracles:
/// |a − b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Address of a random stream: (session, round, client-or-role id).
/// Role ids live far above any realistic client index; see [`roles`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamPath {
    pub session: u64,
    pub round: u64,
    pub unit: u64,
}

impl StreamPath {
    pub fn new(session: u64, round: u64, unit: u64) -> Self {
        Self { session, round, unit }
    }
}

/// Reserved `unit` ids for non-client streams. Client ids occupy the low range.
pub mod roles {
    const BASE: u64 = 1 << 32;
    /// Dataset generation.
    pub const DATASET: u64 = BASE;
    /// Session schedule construction (label choices).
    pub const SCHEDULE: u64 = BASE + 1;
    /// Per-session held-out test split.
    pub const TEST_SPLIT: u64 = BASE + 2;
    /// Per-session client partition.
    pub const PARTITION: u64 = BASE + 3;
    /// Global model initialization.
    pub const MODEL_INIT: u64 = BASE + 4;
    /// Random stand-in for the pilot model (ablation variant).
    pub const RANDOM_PILOT: u64 = BASE + 5;
    /// Per-round participant subsampling.
    pub const PARTICIPATION: u64 = BASE + 6;
    /// Per-round data-variability probe pairs.
    pub const THETA: u64 = BASE + 7;
    /// Post-hoc constant-estimation probes (smoothness, dissimilarity).
    pub const PROBE: u64 = BASE + 8;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream addressed by (seed, path). Streams for distinct
/// paths are statistically independent and may be consumed in any order, which
/// is what makes parallel per-client training reproducible: nobody shares a
/// generator, so completion order cannot matter.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: StreamPath,
    rng: ChaCha8Rng,
}

/// Derives the stream for `path` under `seed`. Pure function of its inputs;
/// does not depend on any previously derived stream.
pub fn derive_stream(seed: u64, path: StreamPath) -> RngStream {
    // Absorb the path into a splitmix64 sponge, then squeeze a 256-bit key.
    let mut acc = seed;
    for component in [path.session, path.round, path.unit] {
        let mut st = acc ^ component.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        acc = splitmix64(&mut st);
    }
    let mut st = acc;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut st).to_le_bytes());
    }
    RngStream {
        seed,
        path,
        rng: ChaCha8Rng::from_seed(key),
    }
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> StreamPath {
        self.path
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        use rand::Rng;
        self.rng.random_range(lo..hi)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// Central finite-difference gradient: (f(w+h·eᵢ) − f(w−h·eᵢ)) / 2h per
/// coordinate. The gradient oracle for analytic-gradient tests; h = 1e-5 gives
/// O(h²) truncation error on smooth losses.
pub fn finite_diff_grad<F>(f: F, w: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    let mut probe = w.clone();
    let mut grad = vec![0.0; w.dim()];
    for i in 0..w.dim() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe);
        probe.values_mut()[i] = orig - h;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        let slope = (up - down) / (2.0 * h);
        if !slope.is_finite() {
            return Err(Error::NonFiniteLoss { coordinate: i });
        }
        grad[i] = slope;
    }
    Ok(ParamVector::new(grad))
}
