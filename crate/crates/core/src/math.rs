//! Log-space numerics shared by the probabilistic modules.
//!
//! All probability mass in the HMM, guidance DP, and rollout composition is
//! kept as natural-log values; `f64::NEG_INFINITY` represents an exact zero.

/// Numerically stable `ln(exp(a) + exp(b))`.
///
/// `NEG_INFINITY` is an absorbing zero: `log_add_exp(-inf, x) == x`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Numerically stable `ln(sum_i exp(xs[i]))` over a slice.
///
/// Returns `NEG_INFINITY` for an empty slice or when every entry is
/// `NEG_INFINITY`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Draws an index from an explicit probability vector.
///
/// The vector must sum to ~1; the final positive entry absorbs any
/// floating-point leftover so the draw is always valid.
pub fn sample_categorical<R: rand::Rng>(rng: &mut R, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let u: f64 = rng.gen::<f64>();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Draws an index from a log-probability vector (`NEG_INFINITY` entries are
/// never selected).
pub fn sample_categorical_from_log<R: rand::Rng>(rng: &mut R, log_probs: &[f64]) -> usize {
    let probs: Vec<f64> = log_probs.iter().map(|&lp| lp.exp()).collect();
    sample_categorical(rng, &probs)
}
