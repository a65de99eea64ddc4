//! Dynamic thresholding: a 512-bin Otsu split of attention weights.
//!
//! Candidate threshold `b` puts bins `0..=b` in class C1 and the rest in C2.
//! Bin `b` is represented by its center `(b + 0.5) / 512`. The selected bin
//! maximizes the between-class variance `w1 w2 (m1 - m2)^2`; ties go to the
//! smaller bin. Elements in bins above the selected one survive the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINS: usize = 512;

/// Histogram bin of a value in `[0, 1]`; `1.0` falls into the last bin.
#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v * BINS as f64) as usize).min(BINS - 1)
}

/// Outcome of one threshold search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub histogram: Vec<u64>,
    pub sigma_b: Vec<f64>,
    /// Last bin of class C1.
    pub k_star_bin: usize,
    /// Threshold value: the upper edge of `k_star_bin`.
    pub k_star: f64,
    /// All mass in a single bin; the mask then keeps everything.
    pub degenerate: bool,
}

impl ThresholdResult {
    /// Whether a value survives the mask.
    #[inline]
    pub fn keeps(&self, v: f64) -> bool {
        self.degenerate || bin_of(v) > self.k_star_bin
    }

    pub fn count(&self) -> u64 {
        self.histogram.iter().sum()
    }
}

/// Between-class variance of a split, from integer class statistics.
///
/// `s1` and `s` are sums of `2b + 1` over the elements (twice the bin
/// centers, in units of `1 / 1024`).
#[inline]
pub(crate) fn between_class(n1: u64, s1: u64, n: u64, s: u64) -> f64 {
    let n2 = n - n1;
    if n1 == 0 || n2 == 0 {
        return 0.0;
    }
    let scale = 2.0 * BINS as f64;
    let w1 = n1 as f64 / n as f64;
    let w2 = n2 as f64 / n as f64;
    let m1 = s1 as f64 / (n1 as f64 * scale);
    let m2 = (s - s1) as f64 / (n2 as f64 * scale);
    w1 * w2 * (m1 - m2) * (m1 - m2)
}

/// Element counts below this are compared in exact integer arithmetic.
const EXACT_LIMIT: u64 = 1 << 26;

/// Between-class variance of a split up to a factor shared by all splits:
/// `(s1·n2 − s2·n1)² / (n1·n2)`.
#[derive(Clone, Copy, Debug, Default)]
struct SplitKey {
    num: u128,
    den: u64,
}

impl SplitKey {
    fn new(n1: u64, s1: u64, n: u64, s: u64) -> Self {
        let n2 = n - n1;
        if n1 == 0 || n2 == 0 {
            return Self::default();
        }
        let d = (s1 as i128 * n2 as i128 - (s - s1) as i128 * n1 as i128).unsigned_abs();
        Self {
            num: d * d,
            den: n1 * n2,
        }
    }

    /// `self > other`, compared as `num_a · den_b > num_b · den_a`.
    fn exceeds(&self, other: &Self) -> bool {
        if self.den == 0 {
            return false;
        }
        if other.den == 0 {
            return self.num > 0;
        }
        wide_mul(self.num, other.den) > wide_mul(other.num, self.den)
    }
}

/// Full 192-bit product as `(high, low)` 128-bit halves.
fn wide_mul(a: u128, b: u64) -> (u128, u128) {
    let (a_hi, a_lo) = (a >> 64, a & u64::MAX as u128);
    let lo = a_lo * b as u128;
    let hi = a_hi * b as u128 + (lo >> 64);
    (hi >> 64, (hi << 64) | (lo & u64::MAX as u128))
}

/// Builds the histogram of `values` (all in `[0, 1]`) and selects `k*`.
pub fn threshold_values<I: IntoIterator<Item = f64>>(values: I) -> Result<ThresholdResult> {
    let mut histogram = vec![0u64; BINS];
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!(
                "attention value {v} outside [0, 1]"
            )));
        }
        histogram[bin_of(v)] += 1;
    }
    Ok(threshold_from_histogram(histogram))
}

pub fn threshold_from_histogram(histogram: Vec<u64>) -> ThresholdResult {
    let n: u64 = histogram.iter().sum();
    let s: u64 = histogram
        .iter()
        .enumerate()
        .map(|(b, &c)| c * (2 * b as u64 + 1))
        .sum();
    let mut sigma_b = vec![0.0; BINS];
    let (mut n1, mut s1) = (0u64, 0u64);
    let mut best = 0usize;
    let mut best_key = SplitKey::default();
    for b in 0..BINS {
        n1 += histogram[b];
        s1 += histogram[b] * (2 * b as u64 + 1);
        sigma_b[b] = between_class(n1, s1, n, s);
        let key = SplitKey::new(n1, s1, n, s);
        let better = if n < EXACT_LIMIT {
            key.exceeds(&best_key)
        } else {
            sigma_b[b] > sigma_b[best]
        };
        if better {
            best = b;
            best_key = key;
        }
    }
    let degenerate = sigma_b[best] == 0.0;
    ThresholdResult {
        histogram,
        sigma_b,
        k_star_bin: best,
        k_star: (best + 1) as f64 / BINS as f64,
        degenerate,
    }
}

/// Within-class variance `w1 s1^2 + w2 s2^2` of the split after bin `b`.
///
/// Minimizing it selects the same bin as maximizing the between-class
/// variance, because the two add up to the total variance.
pub fn within_class_variance(histogram: &[u64], b: usize) -> f64 {
    let level = |k: usize| (k as f64 + 0.5) / BINS as f64;
    let n: u64 = histogram.iter().sum();
    let class = |range: std::ops::Range<usize>| {
        let cnt: u64 = histogram[range.clone()].iter().sum();
        if cnt == 0 {
            return 0.0;
        }
        let mean = range.clone().map(|k| histogram[k] as f64 * level(k)).sum::<f64>() / cnt as f64;
        let var = range
            .map(|k| histogram[k] as f64 * (level(k) - mean).powi(2))
            .sum::<f64>()
            / cnt as f64;
        cnt as f64 / n as f64 * var
    };
    class(0..b + 1) + class(b + 1..histogram.len())
}
