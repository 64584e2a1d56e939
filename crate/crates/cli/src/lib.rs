//! Command-line front end: configuration, orchestration and file output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{execute, CommandError, Options};
pub use config::{CommandKind, RunConfig};
