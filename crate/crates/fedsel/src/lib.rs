//! Experiment harness around `fedsel-core`: configuration files, the panel
//! experiments, CSV output and the verification suite.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod panels;
pub mod output;
pub mod verify;
