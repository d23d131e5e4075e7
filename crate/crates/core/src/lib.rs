//! Minimum contrast estimation of drift parameters in small-noise slow–fast
//! diffusions.
//!
//! The pipeline is: describe a [`model::MultiscaleModel`], reduce it to an
//! [`fast_avg::AveragedModel`] (λ̄, q̄, J̄), integrate the averaged flow and
//! its linearisation ([`flow`]), and minimise the weighted or simplified
//! contrast ([`contrast`]). [`variance`] gives the asymptotic covariances.
//!
//! Builds without `std`; only `alloc` is required.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

extern crate alloc;

pub mod contrast;
pub mod error;
pub mod fast_avg;
pub mod flow;
pub mod linalg;
pub mod math;
pub mod model;
pub mod optimize;
pub mod quadrature;
pub mod registry;
pub mod sim;
pub mod variance;

pub use error::{Error, Result};
