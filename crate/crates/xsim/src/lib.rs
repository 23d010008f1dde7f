//! Scenario files, trace generation and IO, report rendering and the
//! command-line front end over `xsim-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod report;
pub mod workload;

pub use error::{Error, Result};
pub use xsim_core as core;
