//! Synthetic scenarios, the row/column intercept baseline and the hold-out
//! RMSE harness.
//!
//! Conventions fixed by the harness (recorded in every report header):
//!
//! * raw covariate columns alternate Bernoulli(0.5), N(0, 1), Bernoulli(0.5), ...;
//!   the intercept column is prepended afterwards;
//! * DGP coefficients `b_h`, `g_h` are standard normal and act on the design
//!   including the intercept;
//! * exactly `round(sparsity · n · k)` entries of `U` (and of `V`) are zeroed,
//!   chosen uniformly without replacement;
//! * the hold-out set has exactly `round(ς · n · p)` cells.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfileError};
use crate::latent::apply_transform;
use crate::model::{frelu, materialize, HyperParams, ObservedMatrix, SideInfo, Transform};
use crate::optimizer;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    /// Loadings normal around a linear predictor of the covariates.
    Additive,
    /// Loadings are an fReLU link of the covariates times a standard normal.
    Multiplicative,
}

fn default_sparsity() -> f64 {
    0.75
}

fn one() -> f64 {
    1.0
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n: usize,
    pub p: usize,
    pub k_true: usize,
    /// Raw covariates per row (intercept excluded).
    pub q_x: usize,
    /// Raw metacovariates per column (intercept excluded).
    pub q_w: usize,
    pub dgp: Dgp,
    pub holdout_fraction: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity_fraction: f64,
    #[serde(default = "one")]
    pub noise_sd: f64,
    /// Multiplier applied to `UV` before noise is added.
    #[serde(default = "one")]
    pub signal_scale: f64,
    /// Redraw `U` (and `V`) until every factor has at least this many
    /// nonzero rows (columns); 0 accepts any draw.
    #[serde(default)]
    pub min_support: usize,
    /// Rescale every factor's row and column loadings to unit RMS over their
    /// nonzero entries, so all factors carry comparable signal.
    #[serde(default)]
    pub balance_factors: bool,
    pub n_replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.k_true == 0 || self.n_replicates == 0 {
            return Err(XfileError::Domain("n, p, k_true and n_replicates must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(XfileError::Domain(format!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.holdout_size() == 0 {
            return Err(XfileError::Domain("hold-out set rounds to zero cells".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity_fraction) {
            return Err(XfileError::Domain(format!(
                "sparsity_fraction must lie in [0, 1), got {}",
                self.sparsity_fraction
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(XfileError::Domain(format!("noise_sd must be nonnegative, got {}", self.noise_sd)));
        }
        if self.min_support > self.n.min(self.p) {
            return Err(XfileError::Domain("min_support exceeds the matrix dimensions".into()));
        }
        if !self.signal_scale.is_finite() {
            return Err(XfileError::Domain("signal_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn holdout_size(&self) -> usize {
        (self.holdout_fraction * (self.n * self.p) as f64).round() as usize
    }
}

/// A generated data set.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Noisy data; hold-out cells carry their values but are masked out.
    pub data: ObservedMatrix,
    pub side: SideInfo,
    /// Noise-free `UV` (scaled).
    pub truth: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    /// Hidden cells in row-major order.
    pub holdout: Vec<(usize, usize)>,
}

/// Raw covariates with alternating Bernoulli / Gaussian columns.
fn raw_covariates<R: Rng + ?Sized>(rows: usize, q: usize, rng: &mut R) -> Array2<f64> {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut m = Array2::zeros((rows, q));
    for j in 0..q {
        for i in 0..rows {
            m[[i, j]] = if j % 2 == 0 {
                if coin.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.sample(StandardNormal)
            };
        }
    }
    m
}

/// Loadings of one side: `rows × k`, column `h` driven by the design.
fn loadings<R: Rng + ?Sized>(design: &Array2<f64>, k: usize, dgp: Dgp, rng: &mut R) -> Array2<f64> {
    let rows = design.nrows();
    let q = design.ncols();
    let spread = Normal::new(0.0, 0.5).expect("valid sd");
    let mut out = Array2::zeros((rows, k));
    for h in 0..k {
        let coef: Array1<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let score = design.dot(&coef);
        for i in 0..rows {
            out[[i, h]] = match dgp {
                Dgp::Additive => score[i] + spread.sample(rng),
                Dgp::Multiplicative => frelu(score[i], 0.0) * rng.sample::<f64, _>(StandardNormal),
            };
        }
    }
    out
}

fn zero_out<R: Rng + ?Sized>(m: &mut Array2<f64>, fraction: f64, rng: &mut R) {
    let len = m.len();
    let count = (fraction * len as f64).round() as usize;
    let flat = m.as_slice_mut().expect("standard layout");
    for idx in sample(rng, len, count.min(len)).iter() {
        flat[idx] = 0.0;
    }
}

const MAX_SUPPORT_DRAWS: usize = 100_000;

fn sparse_loadings<R: Rng + ?Sized>(spec: &ScenarioSpec, design: &Array2<f64>, rng: &mut R) -> Result<Array2<f64>> {
    for _ in 0..MAX_SUPPORT_DRAWS {
        let mut m = loadings(design, spec.k_true, spec.dgp, rng);
        zero_out(&mut m, spec.sparsity_fraction, rng);
        let supported = m
            .columns()
            .into_iter()
            .all(|c| c.iter().filter(|&&x| x != 0.0).count() >= spec.min_support);
        if !supported {
            continue;
        }
        if spec.balance_factors {
            for mut c in m.columns_mut() {
                let nz = c.iter().filter(|&&x| x != 0.0).count();
                if nz > 0 {
                    let rms = (c.iter().map(|x| x * x).sum::<f64>() / nz as f64).sqrt();
                    c /= rms;
                }
            }
        }
        return Ok(m);
    }
    Err(XfileError::Domain(format!(
        "no draw with min_support = {} in {MAX_SUPPORT_DRAWS} attempts",
        spec.min_support
    )))
}

/// Draw one data set.
pub fn generate<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Scenario> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let x_raw = raw_covariates(n, spec.q_x, rng);
    let w_raw = raw_covariates(p, spec.q_w, rng);
    let side = SideInfo::from_raw(&x_raw, &w_raw)?;
    let u = sparse_loadings(spec, &side.x, rng)?;
    let v = sparse_loadings(spec, &side.w, rng)?;
    let truth = u.dot(&v.t()) * spec.signal_scale;
    let mut y = truth.clone();
    if spec.noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sd).expect("valid sd");
        y.mapv_inplace(|t| t + noise.sample(rng));
    }
    let mut picked: Vec<usize> = sample(rng, n * p, spec.holdout_size()).into_vec();
    picked.sort_unstable();
    let mut mask = Array2::from_elem((n, p), true);
    let holdout: Vec<(usize, usize)> = picked.iter().map(|&c| (c / p, c % p)).collect();
    for &(i, j) in &holdout {
        mask[[i, j]] = false;
    }
    let data = ObservedMatrix::new(y, mask, Transform::Identity)?;
    Ok(Scenario {
        data,
        side,
        truth,
        u,
        v,
        holdout,
    })
}

/// Root mean squared difference over paired cell values.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(XfileError::Dimension(format!(
            "{} predictions for {} cells",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(XfileError::Domain("RMSE over an empty cell set".into()));
    }
    let ss: f64 = predictions.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// RMSE of a prediction matrix against the data on the given cells.
pub fn rmse_cells(pred: &Array2<f64>, y: &Array2<f64>, cells: &[(usize, usize)]) -> Result<f64> {
    let a: Vec<f64> = cells.iter().map(|&(i, j)| pred[[i, j]]).collect();
    let b: Vec<f64> = cells.iter().map(|&(i, j)| y[[i, j]]).collect();
    rmse(&a, &b)
}

/// Row and column intercepts `y_ij ≈ r_i + c_j`, with `mean(c) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub row: Array1<f64>,
    pub col: Array1<f64>,
}

impl Baseline {
    pub fn predict(&self) -> Array2<f64> {
        let (n, p) = (self.row.len(), self.col.len());
        Array2::from_shape_fn((n, p), |(i, j)| self.row[i] + self.col[j])
    }
}

const BASELINE_TOL: f64 = 1e-9;
const BASELINE_MAX_SWEEPS: usize = 100_000;

/// Least-squares intercepts over observed cells by alternating means.
pub fn fit_baseline(data: &ObservedMatrix) -> Baseline {
    let (n, p) = data.values.dim();
    let mut row = Array1::<f64>::zeros(n);
    let mut col = Array1::<f64>::zeros(p);
    let y = &data.values;
    let m = &data.mask;
    for _ in 0..BASELINE_MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let (mut s, mut c) = (0.0, 0usize);
            for j in 0..p {
                if m[[i, j]] {
                    s += y[[i, j]] - col[j];
                    c += 1;
                }
            }
            let new = if c > 0 { s / c as f64 } else { 0.0 };
            change = change.max((new - row[i]).abs());
            row[i] = new;
        }
        for j in 0..p {
            let (mut s, mut c) = (0.0, 0usize);
            for i in 0..n {
                if m[[i, j]] {
                    s += y[[i, j]] - row[i];
                    c += 1;
                }
            }
            let new = if c > 0 { s / c as f64 } else { 0.0 };
            change = change.max((new - col[j]).abs());
            col[j] = new;
        }
        let shift = col.mean().unwrap_or(0.0);
        if shift != 0.0 {
            col -= shift;
            for (i, r) in row.iter_mut().enumerate() {
                if (0..p).any(|j| m[[i, j]]) {
                    *r += shift;
                }
            }
        }
        if change < BASELINE_TOL {
            break;
        }
    }
    Baseline { row, col }
}

/// One line of an experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub replicate: usize,
    pub model: String,
    pub rmse: Option<f64>,
    pub rank_selected: Option<usize>,
    pub wall_time_ms: Option<u64>,
    pub error: Option<String>,
}

/// Median and interquartile range of one model's RMSEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub n_ok: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

pub const MODEL_XFILE: &str = "xfile";
pub const MODEL_BASELINE: &str = "baseline";

/// Lines describing the harness conventions, for report headers.
pub fn report_header(spec: &ScenarioSpec) -> Vec<String> {
    vec![
        format!("scenario: {}", serde_json::to_string(spec).unwrap_or_default()),
        "covariates: raw columns alternate Bernoulli(0.5) and N(0,1); intercept prepended".into(),
        "dgp coefficients: standard normal on the design including the intercept".into(),
        "additive loadings: N(x'b, 0.25); multiplicative loadings: frelu(x'b) * N(0,1)".into(),
        "sparsity: exactly round(fraction * n * k) entries of U and of V zeroed".into(),
        "min_support: U and V redrawn until each factor has that many nonzero entries".into(),
        "balance_factors: each factor's loadings rescaled to unit RMS over their support".into(),
        "rmse: on held-out noisy observations".into(),
    ]
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for model in [MODEL_XFILE, MODEL_BASELINE] {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.model == model)
            .filter_map(|r| r.rmse)
            .collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        out.push(SummaryRow {
            model: model.to_string(),
            n_ok: v.len(),
            median: med,
            q1,
            q3,
            iqr: q3 - q1,
        });
    }
    out
}

/// Seed of the fit in replicate `r`.
pub fn replicate_fit_seed(spec: &ScenarioSpec, hp: &HyperParams, r: usize) -> u64 {
    derive_seed(spec.seed ^ hp.seed, "fit", &[r as u64])
}

fn run_replicate(spec: &ScenarioSpec, hp: &HyperParams, r: usize, tag: &str) -> Vec<ReportRow> {
    let mut rng = stream(spec.seed, tag, &[r as u64]);
    let row = |model: &str, rmse, rank, ms, error| ReportRow {
        replicate: r,
        model: model.to_string(),
        rmse,
        rank_selected: rank,
        wall_time_ms: ms,
        error,
    };
    let sc = match generate(spec, &mut rng) {
        Ok(sc) => sc,
        Err(e) => return vec![row(MODEL_XFILE, None, None, None, Some(e.to_string()))],
    };
    let y = &sc.data.values;

    let mut hp_r = hp.clone();
    hp_r.seed = replicate_fit_seed(spec, hp, r);
    let t0 = Instant::now();
    let xfile = optimizer::fit(&sc.data, &sc.side, &hp_r).and_then(|fit| {
        let pred = apply_transform(
            &materialize(&fit.contributions, &sc.side, hp_r.eps_frelu, spec.n, spec.p),
            sc.data.transform,
        );
        Ok((rmse_cells(&pred, y, &sc.holdout)?, fit.rank))
    });
    let ms_x = t0.elapsed().as_millis() as u64;
    let x_row = match xfile {
        Ok((e, k)) => row(MODEL_XFILE, Some(e), Some(k), Some(ms_x), None),
        Err(e) => row(MODEL_XFILE, None, None, Some(ms_x), Some(e.to_string())),
    };

    let t1 = Instant::now();
    let base = fit_baseline(&sc.data);
    let b_rmse = rmse_cells(&base.predict(), y, &sc.holdout);
    let ms_b = t1.elapsed().as_millis() as u64;
    let b_row = match b_rmse {
        Ok(e) => row(MODEL_BASELINE, Some(e), None, Some(ms_b), None),
        Err(e) => row(MODEL_BASELINE, None, None, Some(ms_b), Some(e.to_string())),
    };
    vec![x_row, b_row]
}

/// Run all replicates of a scenario.
pub fn run_experiment(spec: &ScenarioSpec, hp: &HyperParams) -> Result<Report> {
    spec.validate()?;
    hp.validate()?;
    let rows: Vec<ReportRow> = (0..spec.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(spec, hp, r, "replicate"))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summary = summarize(&rows);
    Ok(Report { rows, summary })
}

/// Hyperparameter grid over `α`, `b_σ` and `b_η`; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub alpha: Vec<f64>,
    pub b_sigma: Vec<f64>,
    pub b_eta: Vec<f64>,
    /// Set `a_σ = b_σ` at every point.
    pub tie_a_sigma: bool,
}

impl Grid {
    /// Every combination, in `α`-major order.
    pub fn points(&self, base: &HyperParams) -> Vec<HyperParams> {
        let pick = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut out = Vec::new();
        for &a in &pick(&self.alpha, base.shrink.alpha) {
            for &bs in &pick(&self.b_sigma, base.b_sigma) {
                for &be in &pick(&self.b_eta, base.b_eta) {
                    let mut hp = base.clone();
                    hp.shrink.alpha = a;
                    hp.b_sigma = bs;
                    if self.tie_a_sigma {
                        hp.a_sigma = bs;
                    }
                    hp.b_eta = be;
                    out.push(hp);
                }
            }
        }
        out
    }
}

/// Pick the grid point with the lowest xfile RMSE on one extra validation
/// data set (drawn from its own stream); ties keep the earlier point.
pub fn select_by_validation(spec: &ScenarioSpec, base: &HyperParams, grid: &Grid) -> Result<(HyperParams, Vec<(HyperParams, Option<f64>)>)> {
    let points = grid.points(base);
    for hp in &points {
        hp.validate()?;
    }
    let scores: Vec<Option<f64>> = points
        .par_iter()
        .map(|hp| run_replicate(spec, hp, 0, "validation")[0].rmse)
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    let (i, _) = best.ok_or_else(|| XfileError::Domain("every grid point failed on the validation set".into()))?;
    let chosen = points[i].clone();
    Ok((chosen, points.into_iter().zip(scores).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec() -> ScenarioSpec {
        ScenarioSpec {
            n: 40,
            p: 30,
            k_true: 3,
            q_x: 4,
            q_w: 3,
            dgp: Dgp::Multiplicative,
            holdout_fraction: 0.2,
            sparsity_fraction: 0.75,
            noise_sd: 1.0,
            signal_scale: 1.0,
            min_support: 0,
            balance_factors: false,
            n_replicates: 2,
            seed: 3,
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        // truth {(1,2),(3,5)}, predictions {(2,2),(3,3)}: squared errors 1 and 4
        let e = rmse(&[2.0, 3.0], &[1.0, 5.0]).unwrap();
        assert!((e - (2.5f64).sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn holdout_size_is_exact() {
        let s = ScenarioSpec {
            n: 100,
            p: 100,
            ..spec()
        };
        assert_eq!(s.holdout_size(), 2000);
        let sc = generate(&s, &mut stream(1, "t", &[])).unwrap();
        assert_eq!(sc.holdout.len(), 2000);
        assert_eq!(sc.data.mask.iter().filter(|&&m| !m).count(), 2000);
    }

    #[test]
    fn zero_fraction_is_exact() {
        let s = ScenarioSpec {
            n: 200,
            k_true: 3,
            ..spec()
        };
        let sc = generate(&s, &mut stream(2, "t", &[])).unwrap();
        let zeros = sc.u.iter().filter(|&&v| v == 0.0).count() as f64 / sc.u.len() as f64;
        // the fReLU link adds zeros of its own
        assert!(zeros >= 0.75, "{zeros}");
        let sc = generate(
            &ScenarioSpec {
                dgp: Dgp::Additive,
                ..s
            },
            &mut stream(2, "t", &[]),
        )
        .unwrap();
        let zeros = sc.u.iter().filter(|&&v| v == 0.0).count() as f64 / sc.u.len() as f64;
        assert!((zeros - 0.75).abs() <= 0.02, "{zeros}");
    }

    #[test]
    fn noiseless_dense_data_has_low_rank() {
        let s = ScenarioSpec {
            sparsity_fraction: 0.0,
            noise_sd: 0.0,
            dgp: Dgp::Additive,
            ..spec()
        };
        let sc = generate(&s, &mut stream(4, "t", &[])).unwrap();
        let m = nalgebra::DMatrix::from_fn(s.n, s.p, |i, j| sc.data.values[[i, j]]);
        let sv = m.singular_values();
        let rank = sv.iter().filter(|&&v| v > 1e-9 * sv[0]).count();
        assert!(rank <= s.k_true);
    }

    #[test]
    fn covariates_alternate() {
        let sc = generate(&spec(), &mut stream(5, "t", &[])).unwrap();
        let x = &sc.side.x;
        assert!(x.column(0).iter().all(|&v| v == 1.0));
        assert!(x.column(1).iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(x.column(2).iter().any(|&v| v != 0.0 && v != 1.0));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&spec(), &mut stream(9, "t", &[])).unwrap();
        let b = generate(&spec(), &mut stream(9, "t", &[])).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.side, b.side);
        assert_eq!(a.holdout, b.holdout);
    }

    #[test]
    fn baseline_constant_matrix() {
        let data = ObservedMatrix::dense(Array2::from_elem((4, 3), 3.0), Transform::Identity).unwrap();
        let b = fit_baseline(&data);
        assert!(b.row.iter().all(|&r| (r - 3.0).abs() < 1e-12));
        assert!(b.col.iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn baseline_exact_additive_data() {
        let r = array![1.0, -2.0, 0.5, 4.0];
        let c = array![0.3, -0.1, 2.0];
        let y = Array2::from_shape_fn((4, 3), |(i, j)| r[i] + c[j]);
        let data = ObservedMatrix::dense(y.clone(), Transform::Identity).unwrap();
        let b = fit_baseline(&data);
        let resid = &b.predict() - &y;
        assert!(resid.iter().all(|v| v.abs() < 1e-8));
        assert!(b.col.sum().abs() < 1e-12);
    }

    #[test]
    fn baseline_matches_normal_equations_with_a_missing_cell() {
        let y = array![[1.0, 2.5, -0.5], [0.2, 3.1, 1.0], [2.2, 0.0, 4.0]];
        let mut mask = Array2::from_elem((3, 3), true);
        mask[[1, 2]] = false;
        let data = ObservedMatrix::new(y.clone(), mask.clone(), Transform::Identity).unwrap();
        let b = fit_baseline(&data);

        // dense least squares in (r1, r2, r3, c1, c2) with c3 = −c1 − c2
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                if !mask[[i, j]] {
                    continue;
                }
                let mut a = vec![0.0; 5];
                a[i] = 1.0;
                if j < 2 {
                    a[3 + j] = 1.0;
                } else {
                    a[3] = -1.0;
                    a[4] = -1.0;
                }
                rows.push(a);
                rhs.push(y[[i, j]]);
            }
        }
        let a = nalgebra::DMatrix::from_fn(rows.len(), 5, |i, j| rows[i][j]);
        let yv = nalgebra::DVector::from_vec(rhs);
        let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * yv)).unwrap();
        for i in 0..3 {
            assert!((b.row[i] - sol[i]).abs() < 1e-7, "row {i}");
        }
        assert!((b.col[0] - sol[3]).abs() < 1e-7);
        assert!((b.col[1] - sol[4]).abs() < 1e-7);
        assert!((b.col[2] + sol[3] + sol[4]).abs() < 1e-7);
    }

    #[test]
    fn summary_median_within_range() {
        let rows: Vec<ReportRow> = [1.3, 0.9, 2.0, 1.1, 1.7]
            .iter()
            .enumerate()
            .map(|(r, &e)| ReportRow {
                replicate: r,
                model: MODEL_XFILE.into(),
                rmse: Some(e),
                rank_selected: Some(1),
                wall_time_ms: None,
                error: None,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].median, 1.3);
        assert_eq!(s[0].q1, 1.1);
        assert_eq!(s[0].q3, 1.7);
        assert!(s[0].median >= 0.9 && s[0].median <= 2.0);
    }

    #[test]
    fn grid_points_cover_the_product() {
        let g = Grid {
            alpha: vec![1.0, 2.0],
            b_sigma: vec![],
            b_eta: vec![0.5, 1.0, 2.0],
            tie_a_sigma: false,
        };
        let pts = g.points(&HyperParams::default());
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[5].shrink.alpha, 2.0);
        assert_eq!(pts[5].b_eta, 2.0);
        assert_eq!(pts[5].b_sigma, 1.0);
    }
}
