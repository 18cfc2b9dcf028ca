//! Discrete-event simulation used to check the analytic bounds.

pub mod engine;
pub mod sampling;
pub mod tail;

pub use engine::{run_simulation, SimConfig, SimResult, TraceRecord};
pub use sampling::sample_access_set;
pub use tail::{empirical_tail, tail_of_samples, TailEstimate};
