//! Std companion of `dvd-core`: ASCII OFF/PLY files, DVDR checkpoints, the
//! JSON experiment config, experiment runners and the `dvd` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;

pub use error::{Error, Result};
