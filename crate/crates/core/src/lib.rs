//! Continuous-discrete Bayesian filtering for stochastic differential equations.
//!
//! Models implement [`sde::SdeModel`] (or [`sde::ParametricSde`] and are
//! augmented with their parameters through [`sde::augment`]). The four filters in
//! [`filters`] consume any such model; [`cstr`] provides the exothermic
//! reactor used by the experiment [`harness`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cstr;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod report;
pub mod sde;
