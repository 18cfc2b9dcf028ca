//! Access-probability subproblem: projected gradient descent with Armijo
//! backtracking over the feasible polytope for a fixed `t`.
//!
//! The objective is evaluated as `F(pi) e^{shift}` with `shift` chosen so the
//! starting value is one. Tail bounds at realistic thresholds are far below
//! the smallest positive double, so the unscaled value cannot be used.

use crate::bounds::{log_weighted_objective, FixedTNode};
use crate::error::{Error, Result};
use crate::model::{aggregate_arrival, weighted_access, AccessMatrix, AuxVector, SystemModel};
use crate::projection::FeasibleRegion;

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Stopping rule for the inner descent.
#[derive(Debug, Clone, Copy)]
pub struct PiOptOptions {
    pub max_iter: usize,
    /// Relative objective decrease below which the descent stops.
    pub rel_tol: f64,
}

impl Default for PiOptOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PiOptOutcome {
    pub pi: AccessMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Scaled objective `F e^{shift}` and its gradient in `pi` (same scale).
/// Entries outside a file's placement have zero gradient.
pub fn scaled_objective_and_gradient(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
    shift: f64,
) -> Result<(f64, AccessMatrix)> {
    let loads = aggregate_arrival(pi, &model.files);
    let weights = weighted_access(pi, &model.files);
    let mut g = vec![0.0; model.num_nodes()];
    let mut dg = vec![0.0; model.num_nodes()];
    let mut value = 0.0;
    for (j, node) in model.nodes.iter().enumerate() {
        let fixed = FixedTNode::new(node, t[j], x);
        let (v, s) = fixed
            .scaled_value_and_slope(loads[j], shift)
            .ok_or(Error::InfeasibleT {
                node: j,
                margin: -fixed.slack(loads[j]),
            })?;
        g[j] = v;
        dg[j] = s;
        value += weights[j] * v;
    }
    let mut grad = AccessMatrix::zeros(pi.rows(), pi.cols());
    for (i, f) in model.files.iter().enumerate() {
        for &j in &f.placement {
            grad.set(i, j, f.weight * g[j] + weights[j] * f.arrival_rate * dg[j]);
        }
    }
    Ok((value, grad))
}

/// Scaled objective alone; `None` when some node is infeasible.
fn scaled_objective(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
    shift: f64,
) -> Option<f64> {
    let loads = aggregate_arrival(pi, &model.files);
    let weights = weighted_access(pi, &model.files);
    let mut value = 0.0;
    for (j, node) in model.nodes.iter().enumerate() {
        let (v, _) = FixedTNode::new(node, t[j], x).scaled_value_and_slope(loads[j], shift)?;
        value += weights[j] * v;
    }
    Some(value)
}

/// Largest gradient gap between a coordinate that can give up mass and one
/// that can absorb it, over all rows. Zero means no row admits descent.
fn descent_spread(pi: &AccessMatrix, grad: &AccessMatrix, model: &SystemModel) -> f64 {
    let mut spread: f64 = 0.0;
    for (i, f) in model.files.iter().enumerate() {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for &j in &f.placement {
            let (p, g) = (pi.get(i, j), grad.get(i, j));
            if p > 0.0 {
                hi = hi.max(g);
            }
            if p < 1.0 {
                lo = lo.min(g);
            }
        }
        if hi > lo {
            spread = spread.max(hi - lo);
        }
    }
    spread
}

/// Projected-gradient stationarity measure `max |pi - P(pi - grad F / F)|`.
pub fn stationarity(pi: &AccessMatrix, t: &AuxVector, x: f64, model: &SystemModel) -> Result<f64> {
    let shift = -log_weighted_objective(pi, t, x, model)?;
    let (_, grad) = scaled_objective_and_gradient(pi, t, x, model, shift)?;
    let region = FeasibleRegion::new(model, t)?;
    let mut stepped = pi.clone();
    for (s, g) in stepped.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *s -= g;
    }
    let projected = region.project(&stepped)?;
    Ok(pi.distance(&projected))
}

/// Minimizes the weighted objective over `pi` for fixed `t`, starting from a
/// feasible `pi0`. Each accepted step satisfies the Armijo condition, so the
/// objective is nonincreasing.
pub fn optimize_pi(
    pi0: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
    opts: PiOptOptions,
) -> Result<PiOptOutcome> {
    let region = FeasibleRegion::new(model, t)?;
    let shift = -log_weighted_objective(pi0, t, x, model)?;
    let mut pi = pi0.clone();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        let (f, grad) = scaled_objective_and_gradient(&pi, t, x, model, shift)?;
        let spread = descent_spread(&pi, &grad, model);
        if !(spread > 0.0) || !spread.is_finite() {
            converged = true;
            break;
        }
        let mut step = (1.0 / spread).min(2.0 * last_step);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = pi.clone();
            for (v, g) in trial.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v -= step * g;
            }
            // a trial whose projection stalls is treated like a rejected step
            let cand = match region.project(&trial) {
                Ok(c) => c,
                Err(e @ Error::ProjectionDiverged { .. }) => {
                    log::debug!("rejecting trial step {step:e}: {e}");
                    step *= BACKTRACK;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let decrease: f64 = grad
                .as_slice()
                .iter()
                .zip(cand.as_slice().iter().zip(pi.as_slice()))
                .map(|(g, (c, p))| g * (c - p))
                .sum();
            if let Some(fc) = scaled_objective(&cand, t, x, model, shift) {
                if fc <= f + ARMIJO_C * decrease && fc <= f {
                    accepted = Some((cand, fc));
                    last_step = step;
                    break;
                }
            }
            step *= BACKTRACK;
        }
        let Some((cand, fc)) = accepted else {
            // no descent along the projected arc: numerically stationary
            converged = true;
            break;
        };
        let rel = (f - fc) / f;
        pi = cand;
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }
    log::trace!("pi step: {iterations} iterations, converged={converged}");
    Ok(PiOptOutcome {
        pi,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::weighted_objective;
    use crate::model::{FileClass, NodeParams};
    use crate::projection::nearest_feasible_init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_node(alpha: [f64; 2], rate: f64) -> SystemModel {
        SystemModel {
            nodes: alpha
                .iter()
                .map(|&a| NodeParams::new(a, 0.005).unwrap())
                .collect(),
            files: vec![FileClass {
                code_n: 2,
                code_k: 1,
                arrival_rate: rate,
                weight: 1.0,
                placement: vec![0, 1],
            }],
            epsilon: 1e-6,
        }
    }

    fn three_file_model() -> SystemModel {
        let nodes = [20.0, 12.0, 25.0, 16.0]
            .iter()
            .map(|&a| NodeParams::new(a, 0.008).unwrap())
            .collect();
        let files = vec![
            FileClass {
                code_n: 3,
                code_k: 2,
                arrival_rate: 1.5,
                weight: 0.3,
                placement: vec![0, 1, 2],
            },
            FileClass {
                code_n: 3,
                code_k: 1,
                arrival_rate: 2.0,
                weight: 0.4,
                placement: vec![1, 2, 3],
            },
            FileClass {
                code_n: 2,
                code_k: 1,
                arrival_rate: 1.5,
                weight: 0.3,
                placement: vec![0, 3],
            },
        ];
        SystemModel {
            nodes,
            files,
            epsilon: 1e-6,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = three_file_model();
        let (pi, _) = nearest_feasible_init(&model).unwrap();
        let t = AuxVector(vec![0.4, 0.3, 0.5, 0.2]);
        let x = 0.7;
        let (f0, grad) = scaled_objective_and_gradient(&pi, &t, x, &model, 0.0).unwrap();
        assert!((f0 - weighted_objective(&pi, &t, x, &model).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for (i, f) in model.files.iter().enumerate() {
            for &j in &f.placement {
                let mut up = pi.clone();
                up.set(i, j, pi.get(i, j) + h);
                let mut dn = pi.clone();
                dn.set(i, j, pi.get(i, j) - h);
                let fd = (scaled_objective(&up, &t, x, &model, 0.0).unwrap()
                    - scaled_objective(&dn, &t, x, &model, 0.0).unwrap())
                    / (2.0 * h);
                let an = grad.get(i, j);
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-3),
                    "({i},{j}) fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn symmetric_nodes_stay_balanced() {
        let model = two_node([20.0, 20.0], 6.0);
        let t = AuxVector(vec![1.0, 1.0]);
        let pi0 = AccessMatrix::from_rows(&[vec![0.8, 0.2]]);
        let out = optimize_pi(&pi0, &t, 1.0, &model, PiOptOptions::default()).unwrap();
        assert!((out.pi.get(0, 0) - 0.5).abs() < 1e-4, "{:?}", out.pi);
    }

    #[test]
    fn faster_node_gets_more_mass_and_matches_grid() {
        let model = two_node([30.0, 10.0], 6.0);
        let t = AuxVector(vec![2.0, 1.0]);
        let x = 1.0;
        let pi0 = AccessMatrix::from_rows(&[vec![0.5, 0.5]]);
        let pi0 = crate::projection::project_feasible(&pi0, &t, &model).unwrap();
        let out = optimize_pi(&pi0, &t, x, &model, PiOptOptions::default()).unwrap();
        let p = out.pi.get(0, 0);
        assert!(p > 0.5);
        // 1-D grid over the feasible segment
        let region = FeasibleRegion::new(&model, &t).unwrap();
        let mut best = (0.0, f64::INFINITY);
        for g in 0..=100_000 {
            let q = g as f64 / 100_000.0;
            let cand = AccessMatrix::from_rows(&[vec![q, 1.0 - q]]);
            if !region.contains(&cand) {
                continue;
            }
            let v = weighted_objective(&cand, &t, x, &model).unwrap();
            if v < best.1 {
                best = (q, v);
            }
        }
        let v = weighted_objective(&out.pi, &t, x, &model).unwrap();
        assert!(v <= best.1 * (1.0 + 1e-6), "pgd {v} grid {}", best.1);
        assert!((p - best.0).abs() < 1e-3);
    }

    #[test]
    fn beats_random_feasible_points() {
        let model = three_file_model();
        let (pi0, _) = nearest_feasible_init(&model).unwrap();
        let t = AuxVector(vec![0.5, 0.3, 0.6, 0.4]);
        let x = 1.0;
        let region = FeasibleRegion::new(&model, &t).unwrap();
        let out = optimize_pi(&pi0, &t, x, &model, PiOptOptions::default()).unwrap();
        let best = weighted_objective(&out.pi, &t, x, &model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let mut r = AccessMatrix::zeros(3, 4);
            for (i, f) in model.files.iter().enumerate() {
                for &j in &f.placement {
                    r.set(i, j, rng.random_range(0.0..1.0));
                }
            }
            let r = region.project(&r).unwrap();
            let v = weighted_objective(&r, &t, x, &model).unwrap();
            assert!(best <= v * (1.0 + 1e-9));
        }
        assert!(stationarity(&out.pi, &t, x, &model).unwrap() < 1e-3);
    }

    #[test]
    fn nonincreasing_and_feasible() {
        let model = three_file_model();
        let (pi0, _) = nearest_feasible_init(&model).unwrap();
        let t = AuxVector(vec![0.5, 0.3, 0.6, 0.4]);
        let before = weighted_objective(&pi0, &t, 2.0, &model).unwrap();
        let out = optimize_pi(&pi0, &t, 2.0, &model, PiOptOptions::default()).unwrap();
        let after = weighted_objective(&out.pi, &t, 2.0, &model).unwrap();
        assert!(after <= before);
        out.pi.check(&model).unwrap();
        crate::projection::check_joint_feasibility(&out.pi, &t, &model).unwrap();
    }
}
