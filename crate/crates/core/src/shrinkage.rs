//! Cumulative shrinkage prior on the factor activations.
//!
//! Stick-breaking weights follow a two-parameter GEM(α, δ) law. The
//! probability that contribution `h` is switched off is the cumulative stick
//! mass `π_h`, so the activation probability `1 − π_h` decays with `h` and the
//! number of active factors `k` has a proper prior.

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, XfileError};

/// Tail mass below which [`default_truncation`] stops.
pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-4;
/// Upper bound on the default truncation level.
pub const MAX_DEFAULT_TRUNCATION: usize = 10_000;
/// Survival level `1 − π_H` above which a truncation is reported as too short.
pub const TRUNCATION_WARN_LEVEL: f64 = 1e-6;
/// Once a simulated survival drops below this level the remaining activations
/// are drawn in one block (see [`simulate_rank_pmf`]).
pub const TAIL_SWITCH_LEVEL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageParams {
    /// Concentration, must exceed `-delta`.
    pub alpha: f64,
    /// Discount in `[0, 1)`.
    pub delta: f64,
}

impl Default for ShrinkageParams {
    fn default() -> Self {
        ShrinkageParams {
            alpha: 5.0,
            delta: 0.0,
        }
    }
}

impl ShrinkageParams {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        let p = ShrinkageParams { alpha, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(XfileError::Domain(format!(
                "delta must lie in [0, 1), got {}",
                self.delta
            )));
        }
        if !(self.alpha > -self.delta) || !self.alpha.is_finite() {
            return Err(XfileError::Domain(format!(
                "alpha must exceed -delta = {}, got {}",
                -self.delta, self.alpha
            )));
        }
        Ok(())
    }

    fn beta_params(&self, m: usize) -> (f64, f64) {
        (1.0 - self.delta, self.alpha + self.delta * m as f64)
    }

    /// `E[Σ_{l>h} (1 − π_l) | π_h] / (1 − π_h)`, finite only for `delta < 1/2`.
    fn tail_factor(&self, h: usize) -> f64 {
        if self.delta >= 0.5 {
            f64::INFINITY
        } else {
            (self.alpha + self.delta * (h as f64 + 1.0)) / (1.0 - 2.0 * self.delta)
        }
    }
}

/// One realization of the stick-breaking sequence, truncated at `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct StickBreakingState {
    pub omegas: Vec<f64>,
    pub varpi: Vec<f64>,
    pub pis: Vec<f64>,
}

impl StickBreakingState {
    /// Build the weights and cumulative probabilities from given breaks.
    pub fn from_omegas(omegas: Vec<f64>) -> Self {
        let mut varpi = Vec::with_capacity(omegas.len());
        let mut pis = Vec::with_capacity(omegas.len());
        let mut remaining = 1.0;
        let mut cumulative = 0.0;
        for &w in &omegas {
            let piece = w * remaining;
            remaining *= 1.0 - w;
            cumulative += piece;
            varpi.push(piece);
            pis.push(cumulative.min(1.0));
        }
        StickBreakingState { omegas, varpi, pis }
    }

    /// `1 − π_h` for each `h`.
    pub fn activation_probs(&self) -> Vec<f64> {
        self.pis.iter().map(|p| 1.0 - p).collect()
    }
}

pub fn sample_sticks<R: Rng + ?Sized>(
    params: &ShrinkageParams,
    truncation: usize,
    rng: &mut R,
) -> Result<StickBreakingState> {
    params.validate()?;
    if truncation == 0 {
        return Err(XfileError::Domain("truncation must be at least 1".into()));
    }
    let omegas = (1..=truncation)
        .map(|m| {
            let (a, b) = params.beta_params(m);
            Beta::new(a, b)
                .map(|d| d.sample(rng))
                .map_err(|e| XfileError::Domain(format!("Beta({a}, {b}): {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StickBreakingState::from_omegas(omegas))
}

/// `log Pr(ρ_h = 1)`, evaluated through log-gamma differences when `delta > 0`.
pub fn ln_prob_active(h: usize, params: &ShrinkageParams) -> Result<f64> {
    params.validate()?;
    if h == 0 {
        return Err(XfileError::Domain("factor index starts at 1".into()));
    }
    let hf = h as f64;
    let (alpha, delta) = (params.alpha, params.delta);
    if delta == 0.0 {
        return Ok(hf * (alpha / (1.0 + alpha)).ln());
    }
    let a = alpha / delta;
    let b = (1.0 + alpha) / delta;
    Ok(ln_gamma(hf + 1.0 + a) + ln_gamma(b) - ln_gamma(hf + b) - ln_gamma(1.0 + a))
}

/// Marginal prior probability that contribution `h` is active.
pub fn prob_active(h: usize, params: &ShrinkageParams) -> Result<f64> {
    ln_prob_active(h, params).map(f64::exp)
}

/// `log Pr(ρ_h = 0)`.
pub fn ln_prob_inactive(h: usize, params: &ShrinkageParams) -> Result<f64> {
    let lq = ln_prob_active(h, params)?;
    // log(1 - e^lq) without cancellation when lq is close to 0
    Ok(if lq > -std::f64::consts::LN_2 {
        (-lq.exp_m1()).ln()
    } else {
        (-lq.exp()).ln_1p()
    })
}

/// Prior mean of the number of active factors; infinite when `delta >= 1/2`.
pub fn expected_rank(params: &ShrinkageParams) -> f64 {
    params.tail_factor(0)
}

/// Smallest `H` whose remaining expected activations fall below
/// [`DEFAULT_TAIL_TOLERANCE`], capped at [`MAX_DEFAULT_TRUNCATION`].
pub fn default_truncation(params: &ShrinkageParams) -> Result<usize> {
    params.validate()?;
    if params.delta >= 0.5 {
        return Ok(MAX_DEFAULT_TRUNCATION);
    }
    for h in 1..=MAX_DEFAULT_TRUNCATION {
        let tail = prob_active(h, params)? * params.tail_factor(h);
        if tail < DEFAULT_TAIL_TOLERANCE {
            return Ok(h);
        }
    }
    Ok(MAX_DEFAULT_TRUNCATION)
}

/// Monte Carlo estimate of the prior distribution of `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPmf {
    /// `pmf[k]` is the empirical frequency of `k` active factors.
    pub pmf: Vec<f64>,
    pub mean: f64,
    /// Monte Carlo standard error of `mean`.
    pub std_error: f64,
    pub n_draws: usize,
    pub truncation: usize,
    /// False when some draw reached the truncation with survival above
    /// [`TRUNCATION_WARN_LEVEL`].
    pub truncation_sufficient: bool,
}

/// Simulate `n_draws` values of `k = Σ_h ρ_h` with `ρ_h ~ Ber(1 − π_h)` given
/// a fresh stick sequence per draw.
///
/// Sticks are broken one at a time up to `truncation` (default from
/// [`default_truncation`]). When the survival `1 − π_h` of a draw falls below
/// [`TAIL_SWITCH_LEVEL`] and `delta < 1/2`, the activations beyond `h` are
/// drawn as a single Poisson count whose mean is their exact conditional
/// expectation `(1 − π_h)(α + δ(h + 1))/(1 − 2δ)`. The same block draw
/// covers whatever remains after the truncation.
pub fn simulate_rank_pmf<R: Rng + ?Sized>(
    params: &ShrinkageParams,
    truncation: Option<usize>,
    n_draws: usize,
    rng: &mut R,
) -> Result<RankPmf> {
    params.validate()?;
    if n_draws == 0 {
        return Err(XfileError::Domain("n_draws must be at least 1".into()));
    }
    let truncation = match truncation {
        Some(0) => return Err(XfileError::Domain("truncation must be at least 1".into())),
        Some(h) => h,
        None => default_truncation(params)?,
    };
    let breaks = StickSampler::new(params, truncation)?;
    let finite_tail = params.delta < 0.5;

    let mut counts: Vec<u64> = Vec::new();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut sufficient = true;
    for _ in 0..n_draws {
        let mut survival = 1.0_f64;
        let mut k: u64 = 0;
        let mut last = truncation;
        for m in 1..=truncation {
            survival *= breaks.survival_factor(m, rng);
            if rng.gen::<f64>() < survival {
                k += 1;
            }
            if finite_tail && survival < TAIL_SWITCH_LEVEL {
                last = m;
                break;
            }
        }
        if last == truncation && survival >= TRUNCATION_WARN_LEVEL {
            sufficient = false;
        }
        if finite_tail && survival > 0.0 {
            let tail_mean = survival * params.tail_factor(last);
            if tail_mean > 0.0 {
                let extra: f64 = Poisson::new(tail_mean)
                    .map_err(|e| XfileError::Domain(format!("Poisson({tail_mean}): {e}")))?
                    .sample(rng);
                k += extra as u64;
            }
        }
        let idx = k as usize;
        if counts.len() <= idx {
            counts.resize(idx + 1, 0);
        }
        counts[idx] += 1;
        let kf = k as f64;
        sum += kf;
        sum_sq += kf * kf;
    }
    if !sufficient {
        log::warn!(
            "truncation H = {truncation} leaves survival above {TRUNCATION_WARN_LEVEL:e} for \
             (alpha = {}, delta = {}); the tail beyond H is {}",
            params.alpha,
            params.delta,
            if finite_tail {
                "drawn from its conditional mean"
            } else {
                "ignored (infinite prior mean)"
            }
        );
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = if n_draws > 1 {
        (sum_sq - n * mean * mean) / (n - 1.0)
    } else {
        0.0
    };
    Ok(RankPmf {
        pmf: counts.iter().map(|&c| c as f64 / n).collect(),
        mean,
        std_error: (var.max(0.0) / n).sqrt(),
        n_draws,
        truncation,
        truncation_sufficient: sufficient,
    })
}

/// Empirical `Pr(ρ_h = 1)` for `h = 1..=h_max`, one stick sequence per draw.
pub fn activation_frequencies<R: Rng + ?Sized>(
    params: &ShrinkageParams,
    h_max: usize,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.validate()?;
    let breaks = StickSampler::new(params, h_max)?;
    let mut hits = vec![0u64; h_max];
    for _ in 0..n_draws {
        let mut survival = 1.0;
        for (m, hit) in hits.iter_mut().enumerate() {
            survival *= breaks.survival_factor(m + 1, rng);
            if rng.gen::<f64>() < survival {
                *hit += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|c| c as f64 / n_draws.max(1) as f64)
        .collect())
}

/// Draws `1 − ω_m` for successive sticks.
struct StickSampler {
    /// `delta == 0`: `1 − ω ~ U^{1/α}`.
    inv_alpha: Option<f64>,
    betas: Vec<Beta<f64>>,
}

impl StickSampler {
    fn new(params: &ShrinkageParams, truncation: usize) -> Result<Self> {
        if params.delta == 0.0 {
            return Ok(StickSampler {
                inv_alpha: Some(1.0 / params.alpha),
                betas: Vec::new(),
            });
        }
        let betas = (1..=truncation)
            .map(|m| {
                let (a, b) = params.beta_params(m);
                Beta::new(a, b).map_err(|e| XfileError::Domain(format!("Beta({a}, {b}): {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StickSampler {
            inv_alpha: None,
            betas,
        })
    }

    #[inline]
    fn survival_factor<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> f64 {
        match self.inv_alpha {
            Some(inv) => {
                let u: f64 = rng.gen();
                (u.ln() * inv).exp()
            }
            None => 1.0 - self.betas[m - 1].sample(rng),
        }
    }
}
