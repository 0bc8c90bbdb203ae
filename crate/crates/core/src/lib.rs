//! Gaussian quasi-maximum likelihood for the dynamic panel model
//!
//! ```text
//! y_it = alpha * y_i,t-1 + delta_t + lambda_i' f_t + eps_it
//! ```
//!
//! written as the simultaneous system `B y_i = delta + F lambda_i + eps_i`, with
//! finite-T efficiency bounds and a simulation harness that checks the local
//! likelihood-ratio expansion numerically.
//!
//! Module map:
//!
//! * [`structural`]: `B`, `J`, `L` and low-rank-plus-diagonal covariance algebra.
//! * [`likelihood`]: full and concentrated quasi log-likelihoods, scores, rotation normalization.
//! * [`estimation`]: QMLE, standard errors, and the fixed-effects comparator.
//! * [`efficiency`]: `gamma_T`, `nu_T`, bounds and the local-parameter norm.
//! * [`local_expansion`]: exact local likelihood ratios versus their quadratic expansion.
//! * [`simulation`]: data generating processes and Monte Carlo drivers.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod efficiency;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod local_expansion;
pub mod simulation;
pub mod structural;

mod linalg;

pub use error::{PanelError, Result};
pub use nalgebra::{DMatrix, DVector};
