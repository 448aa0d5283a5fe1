//! Bilevel evolutionary optimization with dynamic resource competition.
//!
//! The upper level is driven by a CMA-ES over the joint `(x_u, x_l)` space.
//! Every upper-level generation spawns one lower-level task per individual;
//! the tasks compete for lower-level executions through a selection
//! probability built from their upper-level fitness history, and mature tasks
//! share their sampling distributions with less mature ones. Half of the
//! tasks are carried back to the upper level as soon as they converge.
//!
//! Module map:
//!
//! - [`es`]: covariance matrix adaptation evolution strategy used at both levels.
//! - [`problems`]: problem abstraction, FE counting, constraint handling, SMD suite.
//! - [`spu`]: task selection probabilities.
//! - [`cic`]: cooperation between competing tasks.
//! - [`scheduler`]: the outer loop and the competitive lower-level scheduler.
//! - [`harness`]: metrics, statistics, nested baseline and the benchmark runner.

pub mod cic;
pub mod error;
pub mod es;
pub mod harness;
pub mod problems;
pub mod rng;
pub mod scheduler;
pub mod spu;

pub use error::{Error, Result};
