//! Stage-wise MAP factorization of partially observed matrices.
//!
//! The model writes a data matrix as a sum of rank-one contributions whose
//! row and column loadings are scaled by covariate-driven fReLU links and
//! sparsified by Bernoulli flags. A cumulative shrinkage prior on the
//! activation of each contribution selects the rank. Fitting adds one
//! contribution at a time and maximizes the posterior by coordinate ascent.
//!
//! Modules:
//!
//! * [`shrinkage`]: stick-breaking activation prior and the prior on the rank;
//! * [`model`]: data types, likelihood, priors and the log-posterior;
//! * [`optimizer`]: the stage-wise loop and its coordinate-ascent steps;
//! * [`latent`]: nonnegative truncation of the observations;
//! * [`simulation`]: synthetic scenarios, baseline and RMSE harness;
//! * [`io`] and [`cli`]: files and the command line.

pub mod cli;
pub mod error;
pub mod io;
pub mod latent;
mod linalg;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod shrinkage;
pub mod simulation;

pub use error::{Result, XfileError};
pub use model::{FactorContribution, FitResult, HyperParams, ObservedMatrix, SideInfo, Transform};
pub use optimizer::fit;
