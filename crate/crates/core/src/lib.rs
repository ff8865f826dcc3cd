//! Benchmarking toolkit for quantum and classical forecasting models on
//! daily market data.
//!
//! The crate is organised bottom-up:
//!
//! - [`marketdata`], [`features`]: price ingestion, indicators, labels, splits
//! - [`qsim`], [`qkernel`]: statevector simulation and fidelity kernels
//! - [`neural`], [`svr`], [`garch`]: model families
//! - [`backtest`], [`metrics`]: trading simulation and evaluation statistics
//! - [`volstudy`], [`bench`]: study orchestration, config, and reports

pub mod backtest;
pub mod bench;
pub mod error;
pub mod features;
pub mod garch;
pub mod marketdata;
pub mod metrics;
pub mod neural;
pub mod optim;
pub mod qkernel;
pub mod qsim;
pub mod selftest;
pub mod svr;
pub mod synth;
pub mod volstudy;

mod par;

pub use error::{Error, Result};
