//! Scalar and vector helpers shared by the learned components.

use alloc::vec::Vec;

/// Lower clamp used inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn expm1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + ln(-expm1(-y))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - e^s)` for `s <= 0`, i.e. the log-complement of a log-probability.
pub fn log1m_exp(s: f64) -> f64 {
    if s > -core::f64::consts::LN_2 {
        ln(-expm1(s))
    } else {
        ln_1p(-exp(s))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += exp(l - max);
    }
    let lse = max + ln(sum);
    logits.iter().map(|&l| l - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `KL(p || q)` over two probability vectors with ε-clamped logarithms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (ln(pi.max(LOG_EPS)) - ln(qi.max(LOG_EPS)));
        }
    }
    acc
}

/// `KL(p || q)` when both distributions are given as log-probabilities.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    debug_assert_eq!(log_p.len(), log_q.len());
    let mut acc = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        let p = exp(lp);
        if p > 0.0 {
            acc += p * (lp.max(ln(LOG_EPS)) - lq.max(ln(LOG_EPS)));
        }
    }
    acc.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, -2.0, 3.5, 1000.0]);
        let total: f64 = lp.iter().map(|&l| exp(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn log1m_exp_matches_direct() {
        for &s in &[-1e-8, -0.1, -0.69, -0.7, -3.0, -40.0] {
            let direct = ln(1.0 - exp(s));
            assert!((log1m_exp(s) - direct).abs() < 1e-6 * direct.abs().max(1.0));
        }
    }
}
