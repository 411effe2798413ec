//! Paired significance tests between the two tokenization strategies.
//!
//! Side A is always [`TokenizationStrategy::LetterOnly`] and side B is
//! [`TokenizationStrategy::SpaceLetter`].
//!
//! [`TokenizationStrategy::LetterOnly`]: crate::tokenizer::TokenizationStrategy::LetterOnly
//! [`TokenizationStrategy::SpaceLetter`]: crate::tokenizer::TokenizationStrategy::SpaceLetter

use std::collections::HashSet;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{bin_index, BinAccumulator, MetricsError};

/// Differences are reported as significant when `p < SIGNIFICANCE_LEVEL`.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 10_000;

pub fn is_significant(p_value: f64) -> bool {
    p_value < SIGNIFICANCE_LEVEL
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("no paired outcomes")]
    Empty,
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("need at least {min} values, got {got}")]
    TooFewValues { min: usize, got: usize },
    #[error("example id {0:?} appears more than once in the pairing")]
    DuplicateExample(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// One example evaluated under both strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub example_id: String,
    pub correct_a: bool,
    pub correct_b: bool,
    pub confidence_a: f64,
    pub confidence_b: f64,
    pub predicted_a: usize,
    pub predicted_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sidedness {
    /// H1: more examples are correct only under B than only under A.
    OneSidedBGreater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum McNemarMethod {
    ExactBinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Correct only under B.
    pub b: u64,
    /// Correct only under A.
    pub c: u64,
    pub p_value: f64,
    pub sidedness: Sidedness,
    pub method: McNemarMethod,
}

impl McNemarResult {
    pub fn significant(&self) -> bool {
        is_significant(self.p_value)
    }
}

/// Computes `num / 2^exp` rounded to nearest, ties to even.
fn ratio_pow2_to_f64(num: &BigUint, exp: u64) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    let bits = num.bits() as i64;
    // value lies in [2^top, 2^(top + 1))
    let top = bits - 1 - exp as i64;
    let precision = if top >= -1022 { 53 } else { top + 1075 };
    if precision < 0 {
        return 0.0;
    }
    let (mantissa, shift) = if bits > precision {
        let shift = (bits - precision) as u64;
        let mut mantissa = num >> shift;
        let rem = num - (&mantissa << shift);
        let half = BigUint::one() << (shift - 1);
        let odd = mantissa.bit(0);
        if rem > half || (rem == half && odd) {
            mantissa += 1u32;
        }
        (mantissa, shift as i64)
    } else {
        (num.clone(), 0)
    };
    let mantissa = u64::try_from(&mantissa).expect("mantissa fits in 54 bits") as f64;
    ldexp(mantissa, shift - exp as i64)
}

/// `x * 2^k`, exact whenever the result is representable.
fn ldexp(mut x: f64, mut k: i64) -> f64 {
    let step_down = 2f64.powi(-1000);
    let step_up = 2f64.powi(1000);
    while k < -1000 {
        x *= step_down;
        k += 1000;
    }
    while k > 1000 {
        x *= step_up;
        k -= 1000;
    }
    x * 2f64.powi(k as i32)
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`, computed with exact integer arithmetic.
pub fn binomial_upper_tail(k: u64, n: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // Sum C(n, j) for j in k..=n, walking down from C(n, n) = 1.
    let mut term = BigUint::one();
    let mut sum = BigUint::one();
    let mut j = n;
    while j > k {
        // C(n, j-1) = C(n, j) * j / (n - j + 1)
        term = term * j / (n - j + 1);
        sum += &term;
        j -= 1;
    }
    ratio_pow2_to_f64(&sum, n)
}

/// Exact McNemar test from discordant counts.
pub fn mcnemar_from_counts(b: u64, c: u64, sidedness: Sidedness) -> McNemarResult {
    let n = b + c;
    let p_value = if n == 0 {
        1.0
    } else {
        match sidedness {
            Sidedness::OneSidedBGreater => binomial_upper_tail(b, n),
            // P(X <= b) == P(X >= c) by symmetry of Binomial(n, 1/2).
            Sidedness::TwoSided => {
                let tail = binomial_upper_tail(b, n).min(binomial_upper_tail(c, n));
                (2.0 * tail).min(1.0)
            }
        }
    };
    McNemarResult {
        b,
        c,
        p_value,
        sidedness,
        method: McNemarMethod::ExactBinomial,
    }
}

pub fn discordant_counts(pairs: &[PairedOutcome]) -> (u64, u64) {
    pairs.iter().fold((0, 0), |(b, c), p| match (p.correct_a, p.correct_b) {
        (false, true) => (b + 1, c),
        (true, false) => (b, c + 1),
        _ => (b, c),
    })
}

pub fn mcnemar(pairs: &[PairedOutcome], sidedness: Sidedness) -> Result<McNemarResult> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    let (b, c) = discordant_counts(pairs);
    Ok(mcnemar_from_counts(b, c, sidedness))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// ECE(A) - ECE(B) on the full sample.
    pub observed_delta: f64,
    /// Fraction of resamples with delta <= 0.
    pub p_value: f64,
    pub iterations: usize,
    pub seed: u64,
    pub ci_95: (f64, f64),
    pub bins: usize,
}

impl BootstrapResult {
    pub fn significant(&self) -> bool {
        is_significant(self.p_value)
    }
}

/// Generator for one bootstrap iteration: the seed picks the key, the
/// iteration picks the stream, so iterations are independent of scheduling.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be non-empty and ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    if lo == hi || frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn percentile_interval(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        quantile_sorted(&values, 0.025),
        quantile_sorted(&values, 0.975),
    )
}

/// Sorts pairs by example id and rejects duplicates.
pub fn canonical_pairs(pairs: &[PairedOutcome]) -> Result<Vec<PairedOutcome>> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let mut seen = HashSet::new();
    for p in &sorted {
        if !seen.insert(p.example_id.as_str()) {
            return Err(StatsError::DuplicateExample(p.example_id.clone()));
        }
    }
    Ok(sorted)
}

/// Paired bootstrap on the ECE difference between strategies.
pub fn paired_bootstrap_ece(
    pairs: &[PairedOutcome],
    iterations: usize,
    seed: u64,
    bins: usize,
) -> Result<BootstrapResult> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    if iterations < 1 {
        return Err(StatsError::NoIterations);
    }
    let pairs = canonical_pairs(pairs)?;
    let n = pairs.len();
    let binned: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (bin_index(p.confidence_a, bins), bin_index(p.confidence_b, bins)))
        .collect();

    let delta_of = |indices: &mut dyn Iterator<Item = usize>| -> Result<f64> {
        let mut acc_a = BinAccumulator::new(bins)?;
        let mut acc_b = BinAccumulator::new(bins)?;
        for i in indices {
            let p = &pairs[i];
            acc_a.push_binned(binned[i].0, p.confidence_a, p.correct_a);
            acc_b.push_binned(binned[i].1, p.confidence_b, p.correct_b);
        }
        Ok(acc_a.ece()? - acc_b.ece()?)
    };

    let observed_delta = delta_of(&mut (0..n))?;
    let deltas = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = iteration_rng(seed, it);
            delta_of(&mut (0..n).map(|_| rng.random_range(0..n)))
        })
        .collect::<Result<Vec<f64>>>()?;

    let at_most_zero = deltas.iter().filter(|&&d| d <= 0.0).count();
    Ok(BootstrapResult {
        observed_delta,
        p_value: at_most_zero as f64 / iterations as f64,
        iterations,
        seed,
        ci_95: percentile_interval(deltas),
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub mean: f64,
    pub ci_95: (f64, f64),
    pub iterations: usize,
    pub seed: u64,
}

/// Mean of `values` computed as an offset from `shift`, so constant inputs
/// reproduce their value exactly.
fn shifted_mean(values: impl Iterator<Item = f64>, shift: f64) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + (v - shift), c + 1));
    shift + sum / count as f64
}

/// Mean of per-model deltas with a seeded percentile-bootstrap 95% interval.
/// Inputs are sorted before resampling so the result does not depend on model order.
pub fn aggregate_deltas(deltas: &[f64], iterations: usize, seed: u64) -> Result<DeltaSummary> {
    if deltas.len() < 2 {
        return Err(StatsError::TooFewValues {
            min: 2,
            got: deltas.len(),
        });
    }
    if iterations < 1 {
        return Err(StatsError::NoIterations);
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let shift = sorted[0];
    let mean = shifted_mean(sorted.iter().copied(), shift);
    let means: Vec<f64> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = iteration_rng(seed, it);
            shifted_mean((0..k).map(|_| sorted[rng.random_range(0..k)]), shift)
        })
        .collect();
    Ok(DeltaSummary {
        mean,
        ci_95: percentile_interval(means),
        iterations,
        seed,
    })
}
