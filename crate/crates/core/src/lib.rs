//! Variational inference for a dynamic generalized additive Poisson model.
//!
//! Counts indexed by region, cause, age group, gender and month follow a
//! Poisson law with known offsets. The log rate adds spline smooths of a
//! stringency covariate and of age to a latent region-by-cause state that
//! evolves as a stationary AR(1) process with Kronecker-structured
//! precision. [`cavi::run_cavi`] fits a mean-field approximation by
//! coordinate ascent on the evidence lower bound.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`. The simulator and the reference oracles
//! are `f64` only.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod scalar;

pub mod cavi;
pub mod design;
pub mod elbo;
pub mod kron;
pub mod model;
pub mod moments;
pub mod oracles;
pub mod simulate;
pub mod special;
pub mod spline;

pub use cavi::{initial_state, run_cavi, CaviConfig, InitStrategy};
pub use design::{build_design, FitContext, KnotConfig, ModelDesign, SmoothName};
pub use elbo::{elbo_total, ElboBreakdown};
pub use error::{Error, Result};
pub use model::{validate_dataset, Dims, FitReport, PanelDataset, PhiPriorForm, PriorConfig, Record, VariationalState, N_SMOOTHING};
pub use scalar::Scalar;

pub type Panel = PanelDataset<f64>;
pub type State = VariationalState<f64>;
pub type Priors = PriorConfig<f64>;
pub type Context = FitContext<f64>;
pub type Design = ModelDesign<f64>;
pub type Settings = CaviConfig<f64>;
pub type Report = FitReport<f64>;
