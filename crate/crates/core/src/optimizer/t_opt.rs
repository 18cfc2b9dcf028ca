//! Auxiliary-exponent subproblem. The objective separates across nodes and
//! each node term is convex in its own `t_j` on the feasible interval, so
//! every node gets an independent golden-section search.

use crate::bounds::{feasible_t_interval, log_node_factor, stability_margin};
use crate::error::Result;
use crate::model::{aggregate_arrival, AccessMatrix, AuxVector, NodeParams, SystemModel};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizes `f` on `[lo, hi]` assuming unimodality.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, rel_tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a) <= rel_tol * b.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // endpoints can be optimal when the minimum sits on the boundary
    let mut best = (if fc <= fd { c } else { d }, fc.min(fd));
    for e in [lo, hi] {
        let fe = f(e);
        if fe < best.1 {
            best = (e, fe);
        }
    }
    best.0
}

/// Best `t` for one node at load `lambda`: minimizes `e^{-t x} E[e^{t Q}]`
/// subject to `margin(t) <= -epsilon`. For an idle node this is the
/// minimizer of `e^{-t x} M(t)`.
pub fn optimal_node_t(node: &NodeParams, lambda: f64, x: f64, epsilon: f64) -> Result<f64> {
    let (lo, hi) = feasible_t_interval(node, lambda, epsilon)?;
    let phi = |t: f64| log_node_factor(t, lambda, node, x).unwrap_or(f64::INFINITY);
    Ok(golden_section(phi, lo, hi, 1e-13))
}

/// Re-optimizes every `t_j` for the loads implied by `pi`. A node keeps its
/// current value when that is at least as good, so the objective never
/// increases relative to `current`.
pub fn optimize_t(
    pi: &AccessMatrix,
    model: &SystemModel,
    x: f64,
    current: &AuxVector,
) -> Result<AuxVector> {
    let loads = aggregate_arrival(pi, &model.files);
    let mut out = Vec::with_capacity(model.num_nodes());
    for (j, node) in model.nodes.iter().enumerate() {
        let candidate =
            optimal_node_t(node, loads[j], x, model.epsilon).map_err(|e| e.at_node(j))?;
        let keep = current
            .0
            .get(j)
            .copied()
            .filter(|&t| t > 0.0 && stability_margin(t, loads[j], node) <= -model.epsilon);
        let chosen = match keep {
            Some(old) => {
                let f_old = log_node_factor(old, loads[j], node, x).unwrap_or(f64::INFINITY);
                let f_new = log_node_factor(candidate, loads[j], node, x).unwrap_or(f64::INFINITY);
                if f_new < f_old {
                    candidate
                } else {
                    old
                }
            }
            None => candidate,
        };
        out.push(chosen);
    }
    Ok(AuxVector(out))
}
