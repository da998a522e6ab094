//! One-cell conditional problem used to probe how much a large signal is
//! shrunk.
//!
//! A single observed cell `ĉ` is fitted by `c = η` with unit loadings, so the
//! only prior acting on the fitted value is the one `η² ~ InvGamma(a_η, b_η)`
//! induces on `η`. The Student-t likelihood is bounded, so for large `ĉ` the
//! global maximizer is near zero (the cell is written off as an outlier); the
//! quantity of interest is the local mode reached by ascent from the
//! unpenalized estimate `ĉ`.

use crate::model::{cell_marginal_loglik, ln_inv_gamma, HyperParams};

const MAX_BISECTIONS: usize = 200;

/// Log-likelihood of `signal` given fitted value `c > 0`, plus the log
/// density of `c` when `c² ~ InvGamma(a_η, b_η)`.
pub fn cell_map_objective(c: f64, signal: f64, hp: &HyperParams) -> f64 {
    cell_marginal_loglik(signal - c, hp.a_sigma, hp.b_sigma)
        + ln_inv_gamma(c * c, hp.a_eta, hp.b_eta)
        + (2.0 * c).ln()
}

fn slope(c: f64, signal: f64, hp: &HyperParams) -> f64 {
    let r = signal - c;
    let lik = (2.0 * hp.a_sigma + 1.0) * r / (2.0 * hp.b_sigma + r * r);
    let prior = -(2.0 * hp.a_eta + 1.0) / c + 2.0 * hp.b_eta / (c * c * c);
    lik + prior
}

/// Local conditional mode reached by ascent from `signal`.
///
/// Returns `None` unless `signal > 0`.
pub fn conditional_cell_map(signal: f64, hp: &HyperParams) -> Option<f64> {
    if !(signal > 0.0 && signal.is_finite()) {
        return None;
    }
    let d0 = slope(signal, signal, hp);
    if d0 == 0.0 {
        return Some(signal);
    }
    // walk in the ascent direction until the slope changes sign
    let dir = d0.signum();
    let mut step = 1e-3 * signal;
    let mut lo = signal;
    let mut hi = signal + dir * step;
    loop {
        if hi <= 0.0 {
            hi = lo * 0.5;
        }
        if slope(hi, signal, hp) * dir <= 0.0 {
            break;
        }
        lo = hi;
        step *= 2.0;
        hi = lo + dir * step;
    }
    // slope(lo) has sign `dir`, slope(hi) does not
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if slope(mid, signal, hp) * dir > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}
