//! Small numeric helpers shared across modules.

/// Logistic function, stable for large |x|.
#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(p / (1 - p))`, returning +-inf at the endpoints.
#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        p.ln() - (-p).ln_1p()
    }
}

/// Pairwise summation; the result depends only on the slice order, not on
/// how the values were produced.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Binomial pmf `C(n, m) q^m (1 - q)^(n - m)` for all `m` in `0..=n`.
pub(crate) fn binomial_pmf(n: usize, q: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    if q <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    if q >= 1.0 {
        out[n] = 1.0;
        return out;
    }
    let (lq, lr) = (q.ln(), (-q).ln_1p());
    let mut log_choose = 0.0;
    for (m, slot) in out.iter_mut().enumerate() {
        if m > 0 {
            log_choose += ((n - m + 1) as f64).ln() - (m as f64).ln();
        }
        *slot = (log_choose + m as f64 * lq + (n - m) as f64 * lr).exp();
    }
    out
}
