//! Coordinate-ascent steps for a single contribution.
//!
//! Every step leaves the exact objective (Student-t log-likelihood of the
//! current residual plus the log prior of the candidate's parameters) at least
//! as high as before:
//!
//! * loadings (steps 1 and 4) maximize a quadratic minorant of the Student-t
//!   kernel tangent at the current value, row by row or column by column;
//! * sparsity flags (steps 2 and 5) compare both values exactly;
//! * link coefficients (steps 3 and 6) take a Newton step on the minorant and
//!   fall back to a short gradient step when it does not pay off;
//! * the scale (step 7) is the exact conditional mode of `η²` given `v* = ṽη`.
//!
//! Rows (columns) that are currently switched off are re-fitted as if active
//! and switched on during the loading step only when that improves the
//! objective, so steps 1 and 4 never decrease it.

use ndarray::{Array1, Array2};

use crate::latent;
use crate::linalg::solve_spd;
use crate::model::{
    cell_marginal_loglik, frelu, ln_normal, log_prior_params, FactorContribution,
    HyperParams, SideInfo,
};

/// Initial gradient step length in the link-coefficient safeguard.
pub const GRADIENT_STEP: f64 = 0.1;
/// Number of step halvings before the safeguard gives up.
pub const GRADIENT_HALVINGS: usize = 20;
const ACTIVATION_MM_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Loadings,
    RowFlags,
    RowLink,
    ColumnLoadings,
    ColumnFlags,
    ColumnLink,
    Scale,
    Latent,
}

impl Step {
    pub const ORDER: [Step; 7] = [
        Step::Loadings,
        Step::RowFlags,
        Step::RowLink,
        Step::ColumnLoadings,
        Step::ColumnFlags,
        Step::ColumnLink,
        Step::Scale,
    ];
}

/// Truncated-data context: observations and the fit of earlier factors.
#[derive(Debug, Clone, Copy)]
pub struct TruncationContext<'a> {
    pub y: &'a Array2<f64>,
    pub fitted_prev: &'a Array2<f64>,
}

/// The conditional problem for contribution `h`: earlier factors are fixed
/// and enter only through `residual`.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    /// `z̃`: latent values minus the fit of earlier factors.
    pub residual: Array2<f64>,
    pub mask: &'a Array2<bool>,
    pub side: &'a SideInfo,
    pub hp: &'a HyperParams,
    pub truncation: Option<TruncationContext<'a>>,
}

impl<'a> Problem<'a> {
    pub fn new(residual: Array2<f64>, mask: &'a Array2<bool>, side: &'a SideInfo, hp: &'a HyperParams) -> Self {
        Problem {
            residual,
            mask,
            side,
            hp,
            truncation: None,
        }
    }

    pub fn n(&self) -> usize {
        self.residual.nrows()
    }

    pub fn p(&self) -> usize {
        self.residual.ncols()
    }

    #[inline]
    fn ll(&self, r: f64) -> f64 {
        cell_marginal_loglik(r, self.hp.a_sigma, self.hp.b_sigma)
    }

    /// Log-likelihood of the residual left by row factor `a` and column factor `b`.
    fn loglik_of(&self, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let mut total = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            let z = self.residual.row(i);
            let m = self.mask.row(i);
            for j in 0..b.len() {
                if m[j] {
                    total += self.ll(z[j] - ai * b[j]);
                }
            }
        }
        total
    }

    /// Exact objective of a candidate: likelihood of the residual it leaves
    /// plus the log prior of its parameters (activation term excluded).
    pub fn objective(&self, c: &FactorContribution) -> f64 {
        let eps = self.hp.eps_frelu;
        let a = c.row_effective(self.side, eps);
        let b = c.col_effective(self.side, eps) * c.eta;
        self.loglik_of(&a, &b) + log_prior_params(c, self.hp).unwrap_or(f64::NEG_INFINITY)
    }

    /// Likelihood of the residual alone (the candidate switched off).
    pub fn null_loglik(&self) -> f64 {
        self.residual
            .iter()
            .zip(self.mask)
            .filter(|(_, &m)| m)
            .map(|(&r, _)| self.ll(r))
            .sum()
    }
}

/// Candidate parameters plus cached quantities derived from them.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub candidate: FactorContribution,
    /// `x_iᵀβ`.
    pub row_scores: Array1<f64>,
    /// `w_jᵀγ`.
    pub col_scores: Array1<f64>,
    /// Rows with nonzero effective loading.
    pub active_rows: Vec<usize>,
    /// Columns with nonzero effective loading.
    pub active_cols: Vec<usize>,
    /// Rows with `x_iᵀβ > 0`.
    pub link_rows: Vec<usize>,
    /// Columns with `w_jᵀγ > 0`.
    pub link_cols: Vec<usize>,
    pub logpost: f64,
}

impl InnerState {
    pub fn new(candidate: FactorContribution, prob: &Problem) -> Self {
        let mut s = InnerState {
            candidate,
            row_scores: Array1::zeros(0),
            col_scores: Array1::zeros(0),
            active_rows: Vec::new(),
            active_cols: Vec::new(),
            link_rows: Vec::new(),
            link_cols: Vec::new(),
            logpost: 0.0,
        };
        s.refresh(prob);
        s
    }

    /// Recompute cached scores, index sets and the objective.
    pub fn refresh(&mut self, prob: &Problem) {
        let c = &self.candidate;
        self.row_scores = prob.side.x.dot(&c.beta);
        self.col_scores = prob.side.w.dot(&c.gamma);
        let eps = prob.hp.eps_frelu;
        let a = c.row_effective(prob.side, eps);
        let b = c.col_effective(prob.side, eps);
        self.active_rows = nonzero(&a);
        self.active_cols = nonzero(&b);
        self.link_rows = positive(&self.row_scores);
        self.link_cols = positive(&self.col_scores);
        self.logpost = prob.objective(c);
    }

    fn row_links(&self, eps: f64) -> Array1<f64> {
        self.row_scores.mapv(|t| frelu(t, eps))
    }

    fn col_links(&self, eps: f64) -> Array1<f64> {
        self.col_scores.mapv(|t| frelu(t, eps))
    }

    /// `ψ̃_i ũ_i g(x_iᵀβ)`.
    fn row_effective(&self, eps: f64) -> Array1<f64> {
        self.candidate.row_effective_from(&self.row_links(eps))
    }

    /// `φ̃_j ṽ_j g(w_jᵀγ)`.
    fn col_effective(&self, eps: f64) -> Array1<f64> {
        self.candidate.col_effective_from(&self.col_links(eps))
    }

    pub fn apply(&mut self, step: Step, prob: &mut Problem) {
        match step {
            Step::Loadings => self.step_u(prob),
            Step::RowFlags => self.step_psi(prob),
            Step::RowLink => self.step_beta(prob),
            Step::ColumnLoadings => self.step_v(prob),
            Step::ColumnFlags => self.step_phi(prob),
            Step::ColumnLink => self.step_gamma(prob),
            Step::Scale => self.step_eta(prob),
            Step::Latent => self.step_latent(prob),
        }
    }

    /// Step 1: minorize-maximize update of `ũ` with the row treated as active.
    pub fn step_u(&mut self, prob: &Problem) {
        if self.active_cols.is_empty() {
            return;
        }
        let hp = prob.hp;
        let eps = hp.eps_frelu;
        let gx = self.row_links(eps);
        // column factor including the scale: A_ij = gx_i * bcol_j
        let bcol = self.col_effective(eps) * self.candidate.eta;
        let ridge = 1.0 / (2.0 * hp.t_weight());
        let cols = &self.active_cols;
        for i in 0..prob.n() {
            let u_old = self.candidate.u_tilde[i];
            let line = LineProblem::row(prob, i, gx[i], &bcol, cols);
            if self.candidate.psi[i] {
                self.candidate.u_tilde[i] = line.mm_update(u_old, ridge);
            } else {
                let u_new = line.mm_converge(u_old, ridge);
                let lp_on = line.value(u_new) + ln_normal(u_new, 0.0, 1.0) + hp.zeta_n.ln();
                let lp_off = line.value(0.0) + ln_normal(u_old, 0.0, 1.0) + (-hp.zeta_n).ln_1p();
                if lp_on > lp_off {
                    self.candidate.u_tilde[i] = u_new;
                    self.candidate.psi[i] = true;
                }
            }
        }
        self.refresh(prob);
    }

    /// Step 2: keep row `i` active iff that strictly raises the objective.
    pub fn step_psi(&mut self, prob: &Problem) {
        let hp = prob.hp;
        let eps = hp.eps_frelu;
        let gx = self.row_links(eps);
        let bcol = self.col_effective(eps) * self.candidate.eta;
        let log_odds = (hp.zeta_n / (1.0 - hp.zeta_n)).ln();
        let cols: Vec<usize> = (0..prob.p()).filter(|&j| bcol[j] != 0.0).collect();
        for i in 0..prob.n() {
            let line = LineProblem::row(prob, i, gx[i], &bcol, &cols);
            let gain = line.value(self.candidate.u_tilde[i]) - line.value(0.0);
            self.candidate.psi[i] = log_odds + gain > 0.0;
        }
        self.refresh(prob);
    }

    /// Step 3: Newton step on the minorant in `β`, safeguarded.
    pub fn step_beta(&mut self, prob: &Problem) {
        let eps = prob.hp.eps_frelu;
        let bcol = self.col_effective(eps) * self.candidate.eta;
        let loads = self.candidate.row_loadings();
        let design = LinkDesign {
            x: &prob.side.x,
            links_on: &self.link_rows,
            own_loading: &loads,
            other: &bcol,
            transpose: false,
        };
        if let Some(beta) = self.link_update(prob, &design, &self.candidate.beta.clone()) {
            self.candidate.beta = beta;
        }
        self.refresh(prob);
    }

    /// Step 4: minorize-maximize update of `v* = ṽη` with the column treated as active.
    pub fn step_v(&mut self, prob: &Problem) {
        if self.active_rows.is_empty() {
            return;
        }
        let hp = prob.hp;
        let eps = hp.eps_frelu;
        let eta = self.candidate.eta;
        let gw = self.col_links(eps);
        let arow = self.row_effective(eps);
        let ridge = 1.0 / (2.0 * hp.t_weight() * eta * eta);
        let rows = &self.active_rows;
        for j in 0..prob.p() {
            let vstar_old = self.candidate.v_tilde[j] * eta;
            let line = LineProblem::col(prob, j, gw[j], &arow, rows);
            if self.candidate.phi[j] {
                self.candidate.v_tilde[j] = line.mm_update(vstar_old, ridge) / eta;
            } else {
                let v_new = line.mm_converge(vstar_old, ridge);
                let lp_on = line.value(v_new) + ln_normal(v_new, 0.0, eta * eta) + hp.zeta_p.ln();
                let lp_off = line.value(0.0) + ln_normal(vstar_old, 0.0, eta * eta) + (-hp.zeta_p).ln_1p();
                if lp_on > lp_off {
                    self.candidate.v_tilde[j] = v_new / eta;
                    self.candidate.phi[j] = true;
                }
            }
        }
        self.refresh(prob);
    }

    /// Step 5: column flags, mirror of step 2.
    pub fn step_phi(&mut self, prob: &Problem) {
        let hp = prob.hp;
        let eps = hp.eps_frelu;
        let eta = self.candidate.eta;
        let gw = self.col_links(eps);
        let arow = self.row_effective(eps);
        let log_odds = (hp.zeta_p / (1.0 - hp.zeta_p)).ln();
        let rows: Vec<usize> = (0..prob.n()).filter(|&i| arow[i] != 0.0).collect();
        for j in 0..prob.p() {
            let line = LineProblem::col(prob, j, gw[j], &arow, &rows);
            let gain = line.value(self.candidate.v_tilde[j] * eta) - line.value(0.0);
            self.candidate.phi[j] = log_odds + gain > 0.0;
        }
        self.refresh(prob);
    }

    /// Step 6: Newton step on the minorant in `γ`, safeguarded.
    pub fn step_gamma(&mut self, prob: &Problem) {
        let eps = prob.hp.eps_frelu;
        let arow = self.row_effective(eps) * self.candidate.eta;
        let loads = self.candidate.col_loadings();
        let design = LinkDesign {
            x: &prob.side.w,
            links_on: &self.link_cols,
            own_loading: &loads,
            other: &arow,
            transpose: true,
        };
        if let Some(gamma) = self.link_update(prob, &design, &self.candidate.gamma.clone()) {
            self.candidate.gamma = gamma;
        }
        self.refresh(prob);
    }

    /// Step 7: `η²` set to the mode of its inverse-gamma full conditional,
    /// holding `v* = ṽη` fixed.
    pub fn step_eta(&mut self, prob: &Problem) {
        let hp = prob.hp;
        let eta_old = self.candidate.eta;
        let vstar = &self.candidate.v_tilde * eta_old;
        let eta_sq = eta_mode(&vstar, hp);
        let eta = eta_sq.sqrt();
        self.candidate.eta = eta;
        self.candidate.v_tilde = vstar / eta;
        self.refresh(prob);
    }

    /// Step 8: latent residual update for truncated data; no-op otherwise.
    pub fn step_latent(&mut self, prob: &mut Problem) {
        let Some(ctx) = prob.truncation else {
            return;
        };
        let eps = prob.hp.eps_frelu;
        let a = self.row_effective(eps);
        let b = self.col_effective(eps) * self.candidate.eta;
        latent::update_residual(
            &mut prob.residual,
            prob.mask,
            ctx.y,
            ctx.fitted_prev,
            |i, j| a[i] * b[j],
            prob.hp.latent_rule,
        );
        self.refresh(prob);
    }

    /// Newton/gradient update of a link coefficient vector. Returns the new
    /// coefficients, or `None` when no informative cell exists or no
    /// non-decreasing point was found.
    fn link_update(&self, prob: &Problem, d: &LinkDesign, coef: &Array1<f64>) -> Option<Array1<f64>> {
        let hp = prob.hp;
        let eps = hp.eps_frelu;
        let w = hp.t_weight();
        let two_b = 2.0 * hp.b_sigma;
        let q = coef.len();
        let mut mean = Array1::zeros(q);
        mean[0] = hp.intercept_mean();
        let ridge = 1.0 / (2.0 * w);

        let mut normal = Array2::<f64>::eye(q) * ridge;
        let mut rhs = &mean * ridge;
        let mut grad = Array1::<f64>::zeros(q);
        let mut informative = false;
        for &k in d.links_on {
            let own = d.own_loading[k];
            if own == 0.0 {
                continue;
            }
            let g = d.x.row(k).dot(coef) + eps;
            let (mut s0, mut s1, mut sg) = (0.0, 0.0, 0.0);
            for (l, &other) in d.other.iter().enumerate() {
                let (z, m) = d.cell(prob, k, l);
                if !m || other == 0.0 {
                    continue;
                }
                let kcell = own * other;
                let r0 = z - g * kcell;
                let denom = two_b + r0 * r0;
                let wt = kcell * kcell / denom;
                s0 += wt;
                s1 += wt * (z / kcell - eps);
                sg += 2.0 * w * r0 / denom * kcell;
            }
            if s0 == 0.0 {
                continue;
            }
            informative = true;
            let xk = d.x.row(k);
            for a in 0..q {
                rhs[a] += s1 * xk[a];
                grad[a] += sg * xk[a];
                for b in 0..q {
                    normal[[a, b]] += s0 * xk[a] * xk[b];
                }
            }
        }
        if !informative {
            return None;
        }
        grad -= &(coef - &mean);

        let current = self.logpost;
        let score = |c: &Array1<f64>| -> f64 {
            let mut cand = self.candidate.clone();
            if d.transpose {
                cand.gamma = c.clone();
            } else {
                cand.beta = c.clone();
            }
            prob.objective(&cand)
        };
        if let Some(newton) = solve_spd(&normal, &rhs) {
            if newton.iter().all(|v| v.is_finite()) && score(&newton) >= current {
                return Some(newton);
            }
        }
        let mut step = GRADIENT_STEP;
        for _ in 0..GRADIENT_HALVINGS {
            let trial = coef + &(&grad * step);
            if score(&trial) >= current {
                return Some(trial);
            }
            step *= 0.5;
        }
        None
    }
}

/// `η²` maximizing `log N(v* | 0, η² I) + log InvGamma(η²; a_η, b_η)`.
pub fn eta_mode(vstar: &Array1<f64>, hp: &HyperParams) -> f64 {
    let ss: f64 = vstar.iter().map(|v| v * v).sum();
    (hp.b_eta + 0.5 * ss) / (hp.a_eta + 0.5 * vstar.len() as f64 + 1.0)
}

/// Quadratic minorant of the Student-t kernel `ℓ(r)` tangent at `r0`:
/// `ℓ(r0) − (a_σ + ½)(r² − r0²)/(2b_σ + r0²)`, from `ln x ≤ ln x0 + x/x0 − 1`.
pub fn t_minorant(r: f64, r0: f64, hp: &HyperParams) -> f64 {
    cell_marginal_loglik(r0, hp.a_sigma, hp.b_sigma)
        - hp.t_weight() * (r * r - r0 * r0) / (2.0 * hp.b_sigma + r0 * r0)
}

/// `g(1 − ε)`: the link at the intercept prior mean.
pub(crate) fn frelu_unit(eps: f64) -> f64 {
    frelu(1.0 - eps, eps)
}

fn nonzero(v: &Array1<f64>) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(k, _)| k).collect()
}

fn positive(v: &Array1<f64>) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(k, _)| k).collect()
}

/// Cells of a link update: rows of `x` index the side being updated, `other`
/// is the fixed factor on the opposite side (zero where uninformative).
struct LinkDesign<'a> {
    x: &'a Array2<f64>,
    links_on: &'a [usize],
    /// `ψ̃ũ` (or `φ̃ṽ`) on the updated side.
    own_loading: &'a Array1<f64>,
    other: &'a Array1<f64>,
    transpose: bool,
}

impl LinkDesign<'_> {
    #[inline]
    fn cell(&self, prob: &Problem, k: usize, l: usize) -> (f64, bool) {
        if self.transpose {
            (prob.residual[[l, k]], prob.mask[[l, k]])
        } else {
            (prob.residual[[k, l]], prob.mask[[k, l]])
        }
    }
}

/// One row (or column) of the residual against a fixed opposite factor:
/// cell `l` is fitted by `x · coef_l` where `coef_l = link · other_l`.
pub(crate) struct LineProblem<'p, 'a> {
    prob: &'p Problem<'a>,
    index: usize,
    transpose: bool,
    link: f64,
    other: &'p Array1<f64>,
    cells: &'p [usize],
}

impl<'p, 'a> LineProblem<'p, 'a> {
    pub(crate) fn row(prob: &'p Problem<'a>, i: usize, link: f64, other: &'p Array1<f64>, cells: &'p [usize]) -> Self {
        LineProblem {
            prob,
            index: i,
            transpose: false,
            link,
            other,
            cells,
        }
    }

    pub(crate) fn col(prob: &'p Problem<'a>, j: usize, link: f64, other: &'p Array1<f64>, cells: &'p [usize]) -> Self {
        LineProblem {
            prob,
            index: j,
            transpose: true,
            link,
            other,
            cells,
        }
    }

    #[inline]
    fn cell(&self, l: usize) -> Option<(f64, f64)> {
        let (i, j) = if self.transpose { (l, self.index) } else { (self.index, l) };
        if !self.prob.mask[[i, j]] {
            return None;
        }
        Some((self.prob.residual[[i, j]], self.link * self.other[l]))
    }

    /// Log-likelihood of the line when its loading is `x`.
    pub(crate) fn value(&self, x: f64) -> f64 {
        self.cells
            .iter()
            .filter_map(|&l| self.cell(l))
            .map(|(z, a)| self.prob.ll(z - x * a))
            .sum()
    }

    /// Maximizer of the quadratic minorant tangent at `x_old` plus the
    /// Gaussian prior with precision `2(a_σ + ½) · ridge`.
    pub(crate) fn mm_update(&self, x_old: f64, ridge: f64) -> f64 {
        let two_b = 2.0 * self.prob.hp.b_sigma;
        let (mut s0, mut s1) = (0.0, 0.0);
        for &l in self.cells {
            let Some((z, a)) = self.cell(l) else { continue };
            if a == 0.0 {
                continue;
            }
            let r0 = z - x_old * a;
            // 1/D² = A² / (2b + r0²), z̄/D² = zA / (2b + r0²)
            let denom = two_b + r0 * r0;
            s0 += a * a / denom;
            s1 += z * a / denom;
        }
        s1 / (s0 + ridge)
    }

    pub(crate) fn mm_converge(&self, x0: f64, ridge: f64) -> f64 {
        let mut x = x0;
        for _ in 0..ACTIVATION_MM_ITERS {
            let next = self.mm_update(x, ridge);
            let done = (next - x).abs() <= 1e-10 * (1.0 + x.abs());
            x = next;
            if done {
                break;
            }
        }
        x
    }
}

impl FactorContribution {
    pub(crate) fn row_effective_from(&self, links: &Array1<f64>) -> Array1<f64> {
        let mut out = links.clone();
        for ((o, &f), &u) in out.iter_mut().zip(&self.psi).zip(&self.u_tilde) {
            *o = if f { *o * u } else { 0.0 };
        }
        out
    }

    pub(crate) fn col_effective_from(&self, links: &Array1<f64>) -> Array1<f64> {
        let mut out = links.clone();
        for ((o, &f), &v) in out.iter_mut().zip(&self.phi).zip(&self.v_tilde) {
            *o = if f { *o * v } else { 0.0 };
        }
        out
    }

    /// `ψ̃_i ũ_i`.
    pub(crate) fn row_loadings(&self) -> Array1<f64> {
        self.u_tilde
            .iter()
            .zip(&self.psi)
            .map(|(&u, &f)| if f { u } else { 0.0 })
            .collect()
    }

    /// `φ̃_j ṽ_j`.
    pub(crate) fn col_loadings(&self) -> Array1<f64> {
        self.v_tilde
            .iter()
            .zip(&self.phi)
            .map(|(&v, &f)| if f { v } else { 0.0 })
            .collect()
    }
}
