//! Outer loop: `t` step, `pi` step, placement step, repeated until the
//! relative decrease of the objective falls below the tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pi_opt::{optimize_pi, PiOptOptions};
use super::placement::optimize_placement;
use super::t_opt::optimize_t;
use crate::bounds::log_weighted_objective;
use crate::error::Result;
use crate::model::{AccessMatrix, AuxVector, SystemModel};
use crate::projection::nearest_feasible_init;

#[derive(Debug, Clone, Copy)]
pub struct AltOptions {
    /// Relative decrease threshold for the outer loop.
    pub tol: f64,
    pub max_outer: usize,
    pub inner: PiOptOptions,
    /// Drives the file visiting order of the placement step.
    pub seed: u64,
    /// Drives random placements of the `*-RP` policies; `None` uses `seed`.
    pub placement_seed: Option<u64>,
}

impl Default for AltOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer: 500,
            inner: PiOptOptions::default(),
            seed: 0,
            placement_seed: None,
        }
    }
}

/// Which blocks of variables a run is allowed to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMask {
    pub t: bool,
    pub pi: bool,
    pub placement: bool,
}

impl StepMask {
    pub const ALL: Self = Self {
        t: true,
        pi: true,
        placement: true,
    };
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub pi: AccessMatrix,
    pub t: AuxVector,
    pub placements: Vec<Vec<usize>>,
    /// Objective before the first pass and after every pass.
    /// Entries underflow to zero at large thresholds; see `log_objective_trace`.
    pub objective_trace: Vec<f64>,
    pub log_objective_trace: Vec<f64>,
    /// Passes that reduced the objective by at least the tolerance.
    pub iterations: usize,
    /// Total outer passes, including the final confirming one.
    pub passes: usize,
    pub converged: bool,
}

impl Solution {
    pub fn log_objective(&self) -> f64 {
        *self
            .log_objective_trace
            .last()
            .expect("trace is never empty")
    }

    pub fn objective(&self) -> f64 {
        self.log_objective().exp()
    }
}

/// Relative decrease between two log objectives, `1 - e^{new - old}`.
pub fn relative_decrease(log_old: f64, log_new: f64) -> f64 {
    -(log_new - log_old).exp_m1()
}

/// Runs the alternating loop from a feasible `(pi, t)` on `model`,
/// updating only the blocks enabled in `mask`.
pub fn alternate(
    model: &SystemModel,
    pi0: AccessMatrix,
    t0: AuxVector,
    x: f64,
    mask: StepMask,
    opts: &AltOptions,
) -> Result<Solution> {
    let mut model = model.clone();
    let mut pi = pi0;
    let mut t = t0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log_trace = vec![log_weighted_objective(&pi, &t, x, &model)?];
    let mut iterations = 0;
    let mut passes = 0;
    let mut converged = false;

    while passes < opts.max_outer {
        passes += 1;
        if mask.t {
            t = optimize_t(&pi, &model, x, &t)?;
        }
        if mask.pi {
            pi = optimize_pi(&pi, &t, x, &model, opts.inner)?.pi;
        }
        if mask.placement {
            optimize_placement(&mut pi, &mut model, &mut t, x, &mut rng)?;
        }
        let value = log_weighted_objective(&pi, &t, x, &model)?;
        let prev = *log_trace.last().unwrap();
        log_trace.push(value);
        let rel = relative_decrease(prev, value);
        log::debug!("pass {passes}: log objective {value:.6}, relative decrease {rel:e}");
        if rel < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
    }
    if !converged {
        log::warn!("alternating optimization stopped after {passes} passes without converging");
    }

    Ok(Solution {
        placements: model.placements(),
        objective_trace: log_trace.iter().map(|l| l.exp()).collect(),
        log_objective_trace: log_trace,
        pi,
        t,
        iterations,
        passes,
        converged,
    })
}

/// Full joint optimization of access probabilities, auxiliary exponents and
/// placement from the default feasible start.
pub fn alternating_optimize(model: &SystemModel, x: f64, opts: &AltOptions) -> Result<Solution> {
    model.validate()?;
    let (pi, t) = nearest_feasible_init(model)?;
    alternate(model, pi, t, x, StepMask::ALL, opts)
}
