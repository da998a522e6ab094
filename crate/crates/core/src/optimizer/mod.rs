//! Forward stage-wise additive MAP estimation.
//!
//! Contributions are added one at a time. Each candidate is fitted against
//! the residual left by the accepted ones, by coordinate ascent from several
//! random starts, and kept only if the activation-weighted log-posterior of
//! the model with it beats the model without it.

mod robust;
pub mod steps;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::Result;
use crate::model::{
    log_posterior, log_prior_contribution, log_prior_params, FactorContribution, FitResult,
    HyperParams, ObservedMatrix, SideInfo, TraceKind, TracePoint, Transform,
};
use crate::rng::stream;
use crate::shrinkage::{self, ShrinkageParams};

pub use robust::{cell_map_objective, conditional_cell_map};
pub use steps::{eta_mode, t_minorant, InnerState, Problem, Step, TruncationContext};

/// What an observer sees after every coordinate-ascent step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    /// 1-based contribution index.
    pub factor: usize,
    pub restart: usize,
    /// 1-based inner iteration.
    pub iteration: usize,
    pub step: Step,
    /// Objective before and after the step.
    pub before: f64,
    pub after: f64,
    /// Candidate after the step.
    pub candidate: &'a FactorContribution,
    /// `z̃` after the step.
    pub residual: &'a Array2<f64>,
    /// `Σ_{l<h} C_l`.
    pub fitted_prev: &'a Array2<f64>,
}

/// Best candidate of one stage.
#[derive(Debug, Clone)]
pub struct CandidateFit {
    pub candidate: FactorContribution,
    /// Conditional objective (residual likelihood plus parameter log prior).
    pub objective: f64,
    /// Residual at convergence; differs from the input only for truncated data.
    pub residual: Array2<f64>,
    /// Objective after every inner iteration, starting point first.
    pub trace: Vec<f64>,
    pub restart: usize,
}

/// Fit with default (silent) observation.
pub fn fit(data: &ObservedMatrix, side: &SideInfo, hp: &HyperParams) -> Result<FitResult> {
    fit_observed(data, side, hp, &|_| {})
}

/// Stage-wise fit calling `observer` after every inner step of every restart.
pub fn fit_observed(
    data: &ObservedMatrix,
    side: &SideInfo,
    hp: &HyperParams,
    observer: &(dyn Fn(&StepEvent) + Sync),
) -> Result<FitResult> {
    data.validate()?;
    side.validate()?;
    hp.validate()?;
    let (n, p) = data.values.dim();
    side.check_dims(n, p)?;
    let eps = hp.eps_frelu;
    let truncated = data.transform == Transform::NonNegTruncation;

    let mut fitted = Array2::<f64>::zeros((n, p));
    let mut residual = data.initial_latent();
    let mut latent = data.initial_latent();
    let mut contributions: Vec<FactorContribution> = Vec::new();
    let mut trace = Vec::new();
    let mut prior_prev = 0.0;

    for h in 1..=hp.max_factors {
        let ln_q = shrinkage::ln_prob_active(h, &hp.shrink)?;
        let ln_not_q = shrinkage::ln_prob_inactive(h, &hp.shrink)?;
        let mut prob = Problem::new(residual.clone(), &data.mask, side, hp);
        if truncated {
            prob.truncation = Some(TruncationContext {
                y: &data.values,
                fitted_prev: &fitted,
            });
        }
        let best = fit_contribution_observed(&prob, h, observer);
        let offset = prior_prev + ln_q;
        trace.extend(best.trace.iter().enumerate().map(|(it, &v)| TracePoint {
            factor: h,
            kind: TraceKind::Inner,
            iteration: it,
            logpost: v + offset,
        }));

        let inactive = inactive_objective(&prob, hp)?;
        let lp_active = best.objective + offset;
        let lp_inactive = inactive + prior_prev + ln_not_q;
        let degenerate = best.candidate.is_degenerate(side, eps);
        let accept = !degenerate && stopping_decision(best.objective, inactive, h, &hp.shrink)?;
        log::info!(
            "factor {h}: active {lp_active:.4}, inactive {lp_inactive:.4}, degenerate {degenerate}, accept {accept}"
        );
        if !accept {
            trace.push(TracePoint {
                factor: h,
                kind: TraceKind::Rejected,
                iteration: best.trace.len(),
                logpost: lp_inactive,
            });
            break;
        }
        trace.push(TracePoint {
            factor: h,
            kind: TraceKind::Accepted,
            iteration: best.trace.len(),
            logpost: lp_active,
        });

        let mut c = best.candidate;
        c.rho = true;
        c.normalize_sign();
        let ch = c.materialize(side, eps);
        if truncated {
            advance_truncated(data, &mut latent, &mut residual, &fitted, &best.residual, &ch);
        }
        fitted += &ch;
        if !truncated {
            residual = &latent - &fitted;
        }
        prior_prev += log_prior_contribution(&c, hp, h)?;
        contributions.push(c);
    }

    let logpost = log_posterior(data, side, hp, &contributions, &latent)?;
    let latent_residual = &latent - &fitted;
    Ok(FitResult {
        rank: contributions.len(),
        contributions,
        logpost_trace: trace,
        latent,
        latent_residual,
        logpost,
    })
}

/// Move the truncated-data state past an accepted contribution `ch`:
/// latent values of zero cells are taken from the stage's final residual
/// and the next residual is formed so that both truncation invariants hold
/// exactly in floating point.
fn advance_truncated(
    data: &ObservedMatrix,
    latent: &mut Array2<f64>,
    residual: &mut Array2<f64>,
    fitted_prev: &Array2<f64>,
    stage_residual: &Array2<f64>,
    ch: &Array2<f64>,
) {
    for ((i, j), &obs) in data.mask.indexed_iter() {
        let prev = fitted_prev[[i, j]];
        let next = prev + ch[[i, j]];
        if !obs {
            residual[[i, j]] = latent[[i, j]] - next;
            continue;
        }
        let y = data.values[[i, j]];
        if y > 0.0 {
            residual[[i, j]] = y - next;
        } else {
            let z = stage_residual[[i, j]];
            latent[[i, j]] = (prev + z).min(0.0);
            residual[[i, j]] = (z - ch[[i, j]]).min(-next);
        }
    }
}

/// Objective of the model with contribution `h` switched off: parameters at
/// their joint prior mode and, for truncated data, latent zero cells at the
/// mode they take when the contribution is zero.
fn inactive_objective(prob: &Problem, hp: &HyperParams) -> Result<f64> {
    let (n, p) = (prob.n(), prob.p());
    let mode = FactorContribution::prior_mode(n, p, prob.side.q_x(), prob.side.q_w(), hp);
    let mut null = prob.clone();
    if let Some(ctx) = prob.truncation {
        crate::latent::update_residual(
            &mut null.residual,
            prob.mask,
            ctx.y,
            ctx.fitted_prev,
            |_, _| 0.0,
            hp.latent_rule,
        );
    }
    Ok(null.null_loglik() + log_prior_params(&mode, hp)?)
}

/// Keep contribution `h` iff `log q_h + ℓ_active > log(1 − q_h) + ℓ_inactive`.
pub fn stopping_decision(
    logpost_active: f64,
    logpost_inactive: f64,
    h: usize,
    shrink: &ShrinkageParams,
) -> Result<bool> {
    let ln_q = shrinkage::ln_prob_active(h, shrink)?;
    let ln_not_q = shrinkage::ln_prob_inactive(h, shrink)?;
    Ok(ln_q + logpost_active > ln_not_q + logpost_inactive)
}

/// Draw a starting candidate from the priors.
pub fn draw_initial<R: Rng + ?Sized>(n: usize, p: usize, side: &SideInfo, hp: &HyperParams, rng: &mut R) -> FactorContribution {
    let mut c = FactorContribution::prior_mode(n, p, side.q_x(), side.q_w(), hp);
    for u in c.u_tilde.iter_mut() {
        *u = rng.sample(StandardNormal);
    }
    for f in c.psi.iter_mut() {
        *f = rng.gen::<f64>() < hp.zeta_n;
    }
    for b in c.beta.iter_mut() {
        *b += rng.sample::<f64, _>(StandardNormal);
    }
    for v in c.v_tilde.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for f in c.phi.iter_mut() {
        *f = rng.gen::<f64>() < hp.zeta_p;
    }
    for g in c.gamma.iter_mut() {
        *g += rng.sample::<f64, _>(StandardNormal);
    }
    // η⁻² ~ Gamma(shape a_η, rate b_η)
    let precision = Gamma::new(hp.a_eta, 1.0 / hp.b_eta)
        .expect("validated shape and rate")
        .sample(rng);
    c.eta = precision.recip().sqrt();
    c.rho = true;
    c
}

const POWER_ITERS: usize = 200;

/// Leading singular pair of the residual (unobserved cells read as zero) by
/// power iteration.
pub fn leading_pair<R: Rng + ?Sized>(residual: &Array2<f64>, mask: &Array2<bool>, rng: &mut R) -> (f64, Array1<f64>, Array1<f64>) {
    let z = Array2::from_shape_fn(residual.dim(), |(i, j)| if mask[[i, j]] { residual[[i, j]] } else { 0.0 });
    let mut r: Array1<f64> = (0..z.ncols()).map(|_| rng.sample(StandardNormal)).collect();
    let mut l = Array1::zeros(z.nrows());
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERS {
        l = z.dot(&r);
        let ln = l.dot(&l).sqrt();
        if ln == 0.0 {
            break;
        }
        l /= ln;
        r = z.t().dot(&l);
        let rn = r.dot(&r).sqrt();
        if rn == 0.0 {
            break;
        }
        r /= rn;
        let done = (rn - sigma).abs() <= 1e-12 * rn;
        sigma = rn;
        if done {
            break;
        }
    }
    (sigma, l, r)
}

/// Candidate reproducing the leading singular pair, all flags on and link
/// coefficients at their prior means.
pub fn spectral_start<R: Rng + ?Sized>(prob: &Problem, rng: &mut R) -> FactorContribution {
    let hp = prob.hp;
    let (n, p) = (prob.n(), prob.p());
    let mut c = FactorContribution::prior_mode(n, p, prob.side.q_x(), prob.side.q_w(), hp);
    let (sigma, l, r) = leading_pair(&prob.residual, prob.mask, rng);
    let root = sigma.sqrt();
    // links equal 1 at the prior means, so c_ij = u_i v*_j
    let link = steps::frelu_unit(hp.eps_frelu);
    let u = &l * (root / link);
    let vstar = &r * (root / link);
    c.eta = eta_mode(&vstar, hp).sqrt();
    c.u_tilde = u;
    c.v_tilde = vstar / c.eta;
    c.psi.fill(true);
    c.phi.fill(true);
    c.rho = true;
    c
}

/// Best of `n_restarts` coordinate-ascent runs for contribution `h`.
pub fn fit_contribution(prob: &Problem, h: usize) -> CandidateFit {
    fit_contribution_observed(prob, h, &|_| {})
}

pub fn fit_contribution_observed(
    prob: &Problem,
    h: usize,
    observer: &(dyn Fn(&StepEvent) + Sync),
) -> CandidateFit {
    let hp = prob.hp;
    let runs: Vec<CandidateFit> = (0..hp.n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(hp.seed, "restart", &[h as u64, r as u64]);
            let init = if r == 0 && hp.spectral_start {
                spectral_start(prob, &mut rng)
            } else {
                draw_initial(prob.n(), prob.p(), prob.side, hp, &mut rng)
            };
            run_inner(prob.clone(), init, h, r, observer)
        })
        .collect();
    let mut best: Option<CandidateFit> = None;
    for run in runs {
        // strict comparison keeps the lowest restart index on ties
        if best.as_ref().map_or(true, |b| run.objective > b.objective) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

/// One coordinate-ascent run from `init`.
pub fn run_inner(
    mut prob: Problem,
    init: FactorContribution,
    h: usize,
    restart: usize,
    observer: &(dyn Fn(&StepEvent) + Sync),
) -> CandidateFit {
    let hp = prob.hp;
    let mut state = InnerState::new(init, &prob);
    if prob.truncation.is_some() {
        // make the starting residual consistent with the starting candidate
        state.apply(Step::Latent, &mut prob);
    }
    let mut trace = vec![state.logpost];
    let fitted_zero;
    let fitted_prev = match prob.truncation {
        Some(ctx) => ctx.fitted_prev,
        None => {
            fitted_zero = Array2::zeros((0, 0));
            &fitted_zero
        }
    };
    let steps: &[Step] = if prob.truncation.is_some() {
        &[
            Step::Loadings,
            Step::RowFlags,
            Step::RowLink,
            Step::ColumnLoadings,
            Step::ColumnFlags,
            Step::ColumnLink,
            Step::Scale,
            Step::Latent,
        ]
    } else {
        &Step::ORDER
    };
    for it in 1..=hp.max_inner_iters {
        let start = state.logpost;
        for &step in steps {
            let before = state.logpost;
            state.apply(step, &mut prob);
            observer(&StepEvent {
                factor: h,
                restart,
                iteration: it,
                step,
                before,
                after: state.logpost,
                candidate: &state.candidate,
                residual: &prob.residual,
                fitted_prev,
            });
        }
        trace.push(state.logpost);
        if (state.logpost - start).abs() <= hp.tol * start.abs().max(1.0) {
            break;
        }
    }
    CandidateFit {
        objective: state.logpost,
        candidate: state.candidate,
        residual: prob.residual,
        trace,
        restart,
    }
}
