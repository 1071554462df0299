//! Desk-scale laboratory for trajectory-shifted latent perturbations that
//! make training samples unlearnable for diffusion personalization.

// `!(x <= limit)` is how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod personalize;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
