//! Alternating minimization of the weighted tail bound over access
//! probabilities, auxiliary exponents and chunk placement.

pub mod alternating;
pub mod hungarian;
pub mod pi_opt;
pub mod placement;
pub mod policy;
pub mod t_opt;

pub use alternating::{alternate, alternating_optimize, AltOptions, Solution, StepMask};
pub use hungarian::{hungarian, Assignment};
pub use pi_opt::{optimize_pi, PiOptOptions};
pub use placement::{optimize_placement, placement_edge_weights};
pub use policy::{baseline_policy, PolicyKind};
pub use t_opt::optimize_t;

use crate::error::Result;
use crate::model::SystemModel;

/// Runs any policy; `Wltp` is the full joint optimization.
pub fn run_policy(
    kind: PolicyKind,
    model: &SystemModel,
    x: f64,
    opts: &AltOptions,
) -> Result<Solution> {
    match kind {
        PolicyKind::Wltp => alternating_optimize(model, x, opts),
        other => baseline_policy(other, model, x, opts),
    }
}
