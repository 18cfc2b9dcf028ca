//! Tail-latency bounds, scheduling optimization and fork-join simulation for
//! erasure-coded distributed storage.
//!
//! Each file request is split into `k_i` chunk requests dispatched to a
//! random `k_i`-subset of the file's `n_i` hosting nodes with marginal
//! probabilities `pi_ij`. Nodes are M/G/1 FCFS queues with shifted
//! exponential service. [`bounds`] turns the Pollaczek-Khinchine transform into
//! per-file tail bounds, [`optimizer`] minimizes their weighted sum over
//! scheduling, auxiliary exponents and placement, and [`sim`] checks the
//! bounds against a discrete-event simulation.

pub mod bounds;
pub mod error;
pub mod experiments;
pub mod model;
pub mod optimizer;
pub mod projection;
pub mod sim;

pub use error::{Error, Result};
pub use model::{AccessMatrix, AuxVector, FileClass, NodeParams, SystemModel};
