//! Neural stochastic contraction metrics.
//!
//! The pipeline samples optimal stochastic contraction metrics by convex
//! optimization, fits them with a spectrally-normalized network whose metric
//! derivatives carry a certified Lipschitz constant, and checks the resulting
//! control and estimation policies against their mean-squared-error bounds by
//! Monte-Carlo simulation of the Itô dynamics.

// `!(x > 0.0)` is how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod lmi;
pub mod mcvstem;
pub mod nn;
pub mod pipeline;
pub mod sdp;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
