//! Command-line driver: configuration, training, and the subcommands that
//! match, evaluate, benchmark and analyse.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod train;
