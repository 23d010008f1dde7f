//! Scheduling policies, memory managers and a deterministic discrete-event
//! engine for simulating LLM serving clusters.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, trace
//! generation and the command-line front end live in the `xsim` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod balance;
pub mod beam;
pub mod coloc;
pub mod epd;
pub mod error;
pub mod kernel;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod pd;
pub mod sim;
pub mod xtensor;

pub use error::{Error, Result};
