//! Federated learning under two-stage client selection.
//!
//! Clients first *enroll* (become reachable at all) based on pre-enrollment
//! covariates, and then, every round, enrolled clients *participate* based on
//! pre-round covariates. This crate simulates that mechanism over a synthetic
//! logistic-regression population and provides the aggregators that do and do
//! not correct for it:
//!
//! * [`federation`]: local SGD, naive / IPW / calibrated aggregation, the
//!   server step and the full training loop.
//! * [`propensity`]: IRLS logistic fits for the two selection stages and the
//!   clipped plug-in inclusion probabilities.
//! * [`calibration`]: closest-to-uniform calibration weights that reproduce
//!   known population moments.
//! * [`theory`]: exact enumeration oracles, the two-client lower-bound
//!   instance and the bias-floor bound evaluator.
//!
//! The crate is `no_std` (it only needs `alloc`); IO, configuration and the
//! command line live in the companion `fedsel` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod calibration;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod math;
pub mod objective;
pub mod propensity;
pub mod rng;
pub mod selection;
pub mod synthgen;
pub mod theory;

pub use error::{Error, Result};
