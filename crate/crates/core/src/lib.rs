//! Expert elicitation engine.
//!
//! Fits parametric distributions to elicited probability judgements, builds
//! conditional models through the extension method, joins marginals with a
//! Gaussian copula, and turns the joint elicited distribution into a
//! probability of success for a confirmatory trial program. The [`session`]
//! module keeps the workshop record as an append-only event log.

// `!(a < b)` is used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod copula;
pub mod decimal;
pub mod distfit;
pub mod elicitation;
pub mod extension;
pub mod pos;
pub mod sampling;
pub mod session;

pub use distfit::{Family, Fit, FittedDistribution, MixtureDistribution, ProbabilityConstraint, Support};
