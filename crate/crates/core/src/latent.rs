//! Nonnegative truncation: `y = z 1{z > 0}` with a latent Gaussian `z`.
//!
//! Positive observations pin the latent value. Zero observations only bound
//! it from above, and the latent value is re-estimated inside every inner
//! iteration as the mode of its truncated full conditional.

use ndarray::Array2;

use crate::error::{Result, XfileError};
use crate::model::{HyperParams, LatentRule, ObservedMatrix, Transform};

/// Residual and fits around contribution `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Latent values minus `fitted_prev`.
    pub z_tilde: Array2<f64>,
    /// `Σ_{l<h} C_l`.
    pub fitted_prev: Array2<f64>,
    /// `Σ_{l≤h} C_l`.
    pub fitted_curr: Array2<f64>,
}

impl LatentState {
    /// Check both truncation invariants on the observed cells.
    pub fn check(&self, data: &ObservedMatrix) -> Result<()> {
        for ((i, j), &obs) in data.mask.indexed_iter() {
            if !obs {
                continue;
            }
            let y = data.values[[i, j]];
            let z = self.z_tilde[[i, j]];
            let prev = self.fitted_prev[[i, j]];
            if y > 0.0 && z != y - prev {
                return Err(XfileError::InconsistentLatent {
                    row: i,
                    col: j,
                    reason: "residual of a positive cell is not y minus the previous fit",
                });
            }
            if y == 0.0 && prev + z > 0.0 {
                return Err(XfileError::InconsistentLatent {
                    row: i,
                    col: j,
                    reason: "latent value of a zero cell is positive",
                });
            }
        }
        Ok(())
    }
}

/// Latent residual update (step 8). Identity data is returned unchanged.
pub fn update_latent(state: &LatentState, data: &ObservedMatrix, hp: &HyperParams) -> LatentState {
    let mut next = state.clone();
    if data.transform == Transform::Identity {
        return next;
    }
    let current = &state.fitted_curr - &state.fitted_prev;
    update_residual(
        &mut next.z_tilde,
        &data.mask,
        &data.values,
        &state.fitted_prev,
        |i, j| current[[i, j]],
        hp.latent_rule,
    );
    next
}

/// In-place form of [`update_latent`]; `contribution(i, j)` is `c_hij`.
pub(crate) fn update_residual(
    residual: &mut Array2<f64>,
    mask: &Array2<bool>,
    y: &Array2<f64>,
    fitted_prev: &Array2<f64>,
    contribution: impl Fn(usize, usize) -> f64,
    rule: LatentRule,
) {
    for ((i, j), z) in residual.indexed_iter_mut() {
        if !mask[[i, j]] {
            continue;
        }
        let prev = fitted_prev[[i, j]];
        let obs = y[[i, j]];
        if obs > 0.0 {
            *z = obs - prev;
            continue;
        }
        let bound = -prev;
        let c = contribution(i, j);
        let location = match rule {
            LatentRule::Printed => prev + c,
            LatentRule::Exact => c,
        };
        *z = if location < bound { location } else { bound };
    }
}

/// Map latent values to the observation scale.
pub fn apply_transform(latent: &Array2<f64>, transform: Transform) -> Array2<f64> {
    match transform {
        Transform::Identity => latent.clone(),
        Transform::NonNegTruncation => latent.mapv(|z| z.max(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(y: f64, prev: f64, curr: f64) -> (LatentState, ObservedMatrix) {
        let data = ObservedMatrix::dense(array![[y]], Transform::NonNegTruncation).unwrap();
        let state = LatentState {
            z_tilde: array![[0.0]],
            fitted_prev: array![[prev]],
            fitted_curr: array![[curr]],
        };
        (state, data)
    }

    #[test]
    fn positive_cell_is_pinned() {
        let (s, d) = single(3.0, 1.0, 1.7);
        let next = update_latent(&s, &d, &HyperParams::default());
        assert_eq!(next.z_tilde[[0, 0]], 2.0);
    }

    #[test]
    fn zero_cell_interior_mode() {
        // Σ_{l≤h} c = −1, −Σ_{l<h} c = 0.5
        let (s, d) = single(0.0, -0.5, -1.0);
        let next = update_latent(&s, &d, &HyperParams::default());
        assert_eq!(next.z_tilde[[0, 0]], -1.0);
        next.check(&d).unwrap();
    }

    #[test]
    fn zero_cell_clipped_at_bound() {
        // Σ_{l≤h} c = 0.2, −Σ_{l<h} c = −0.5
        let (s, d) = single(0.0, 0.5, 0.2);
        let next = update_latent(&s, &d, &HyperParams::default());
        assert_eq!(next.z_tilde[[0, 0]], -0.5);
        next.check(&d).unwrap();
    }

    #[test]
    fn exact_rule_uses_the_contribution_as_location() {
        let hp = HyperParams {
            latent_rule: LatentRule::Exact,
            ..Default::default()
        };
        let (s, d) = single(0.0, -0.5, -1.0);
        assert_eq!(update_latent(&s, &d, &hp).z_tilde[[0, 0]], -0.5);
        let (s, d) = single(0.0, 0.5, 0.2);
        assert_eq!(update_latent(&s, &d, &hp).z_tilde[[0, 0]], -0.5);
        let (s, d) = single(0.0, 0.0, -2.0);
        assert_eq!(update_latent(&s, &d, &hp).z_tilde[[0, 0]], -2.0);
    }

    #[test]
    fn identity_is_a_no_op() {
        let data = ObservedMatrix::dense(array![[0.0, 1.0]], Transform::Identity).unwrap();
        let s = LatentState {
            z_tilde: array![[4.0, 5.0]],
            fitted_prev: array![[1.0, 1.0]],
            fitted_curr: array![[-3.0, 2.0]],
        };
        assert_eq!(update_latent(&s, &data, &HyperParams::default()), s);
    }

    #[test]
    fn transform_examples() {
        let z = array![[-1.0, 0.0, 2.0]];
        assert_eq!(apply_transform(&z, Transform::Identity), z);
        assert_eq!(apply_transform(&z, Transform::NonNegTruncation), array![[0.0, 0.0, 2.0]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold_after_update(
                cells in proptest::collection::vec((0.0f64..3.0, -4.0f64..4.0, -4.0f64..4.0, any::<bool>()), 1..40),
                exact in any::<bool>(),
            ) {
                let k = cells.len();
                let y = Array2::from_shape_fn((1, k), |(_, j)| if cells[j].3 { 0.0 } else { cells[j].0 });
                let prev = Array2::from_shape_fn((1, k), |(_, j)| cells[j].1);
                let curr = Array2::from_shape_fn((1, k), |(_, j)| cells[j].1 + cells[j].2);
                let data = ObservedMatrix::dense(y, Transform::NonNegTruncation).unwrap();
                let hp = HyperParams {
                    latent_rule: if exact { LatentRule::Exact } else { LatentRule::Printed },
                    ..Default::default()
                };
                let s = LatentState { z_tilde: Array2::zeros((1, k)), fitted_prev: prev, fitted_curr: curr };
                let next = update_latent(&s, &data, &hp);
                prop_assert!(next.check(&data).is_ok());
            }
        }
    }
}
