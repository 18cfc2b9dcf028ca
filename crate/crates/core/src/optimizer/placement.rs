//! Chunk placement subproblem. Files are visited one at a time in a seeded
//! random order; each visit solves an `m x m` assignment that moves every
//! chunk (with its access probability) to a new node.
//!
//! Evaluating a move at the current exponents almost never admits it: the
//! exponent step leaves each node only a sliver of load headroom. Moves are
//! therefore priced with the destination's exponent refit for its new load.

use rand::seq::SliceRandom;
use rand::Rng;

use super::hungarian::hungarian;
use super::t_opt::optimal_node_t;
use crate::bounds::{log_node_factor, log_weighted_objective, stability_margin, FixedTNode};
use crate::error::Result;
use crate::model::{aggregate_arrival, weighted_access, AccessMatrix, AuxVector, SystemModel};

/// Relative size of the penalty placed on moves that would leave the
/// destination unable to satisfy its stability margin.
const PENALTY_FACTOR: f64 = 1e9;

fn edge_weights_scaled(
    file: usize,
    pi: &AccessMatrix,
    t: &AuxVector,
    model: &SystemModel,
    x: f64,
    shift: f64,
) -> Vec<Vec<f64>> {
    let m = model.num_nodes();
    let f = &model.files[file];
    let loads = aggregate_arrival(pi, &model.files);
    let fixed: Vec<FixedTNode> = model
        .nodes
        .iter()
        .zip(&t.0)
        .map(|(n, &tj)| FixedTNode::new(n, tj, x))
        .collect();
    let mut d = vec![vec![0.0; m]; m];
    let mut infeasible = Vec::new();
    let mut max_finite: f64 = 0.0;
    for u in 0..m {
        let p = pi.get(file, u);
        if p == 0.0 {
            continue;
        }
        for v in 0..m {
            let others = (loads[v] - f.arrival_rate * pi.get(file, v)).max(0.0);
            let load = others + f.arrival_rate * p;
            let feasible = load <= fixed[v].cap(model.epsilon);
            match fixed[v].scaled_value_and_slope(load, shift) {
                Some((g, _)) if feasible => {
                    d[u][v] = f.arrival_rate * p * g;
                    max_finite = max_finite.max(d[u][v]);
                }
                _ => infeasible.push((u, v)),
            }
        }
    }
    let penalty = PENALTY_FACTOR * (m as f64 + 1.0) * (1.0 + max_finite);
    for (u, v) in infeasible {
        d[u][v] = penalty;
    }
    d
}

/// Cost of moving file `file`'s chunk from node `u` to node `v`:
/// `lambda_i pi_iu e^{-t_v x} E[e^{t_v Q_v}]` evaluated at the load `v`
/// would carry after the move (other files' load plus this chunk).
/// Rows for nodes the file does not use are zero. Moves that break the
/// destination's stability margin get a large finite penalty.
pub fn placement_edge_weights(
    file: usize,
    pi: &AccessMatrix,
    t: &AuxVector,
    model: &SystemModel,
    x: f64,
) -> Vec<Vec<f64>> {
    edge_weights_scaled(file, pi, t, model, x, 0.0)
}

/// Moves every chunk of `file` according to `assignment[u] = v`.
fn permute_file(pi: &mut AccessMatrix, model: &mut SystemModel, file: usize, assignment: &[usize]) {
    let old = pi.row(file).to_vec();
    let row = pi.row_mut(file);
    row.iter_mut().for_each(|v| *v = 0.0);
    for (u, &v) in assignment.iter().enumerate() {
        row[v] = old[u];
    }
    let f = &mut model.files[file];
    let mut placement: Vec<usize> = f.placement.iter().map(|&u| assignment[u]).collect();
    placement.sort_unstable();
    f.placement = placement;
}

/// Best exponent and log factor for node `v` at `load`: the better of the
/// current `t_v` (if still feasible) and the re-optimized one.
fn best_log_factor(
    model: &SystemModel,
    v: usize,
    load: f64,
    t_current: f64,
    x: f64,
) -> Option<(f64, f64)> {
    let node = &model.nodes[v];
    let current = (stability_margin(t_current, load, node) <= -model.epsilon)
        .then(|| log_node_factor(t_current, load, node, x).ok())
        .flatten()
        .map(|l| (t_current, l));
    let refit = optimal_node_t(node, load, x, model.epsilon)
        .ok()
        .and_then(|t| log_node_factor(t, load, node, x).ok().map(|l| (t, l)));
    match (current, refit) {
        (Some(c), Some(r)) => Some(if r.1 < c.1 { r } else { c }),
        (c, r) => c.or(r),
    }
}

/// Exact cost of a permutation of `file`'s chunks when every node's exponent
/// is refit for its new load. Node `v` receiving the chunk from `u` ends with
/// weight `W_v^{-i} + omega_i pi_iu` and load `Lambda_v^{-i} + lambda_i pi_iu`,
/// so the objective after the move separates over `(u, v)`. Each entry is the
/// change of node `v`'s term relative to `v` holding nothing of this file,
/// scaled by a common factor. Returns the costs and the refit exponents.
fn refit_costs(
    file: usize,
    pi: &AccessMatrix,
    t: &AuxVector,
    model: &SystemModel,
    x: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let m = model.num_nodes();
    let f = &model.files[file];
    let loads = aggregate_arrival(pi, &model.files);
    let weights = weighted_access(pi, &model.files);
    let mut log_new = vec![vec![None; m]; m];
    let mut t_new = vec![vec![0.0; m]; m];
    let mut base = vec![None; m];
    for v in 0..m {
        let base_load = (loads[v] - f.arrival_rate * pi.get(file, v)).max(0.0);
        let base_weight = (weights[v] - f.weight * pi.get(file, v)).max(0.0);
        let base_lf = best_log_factor(model, v, base_load, t[v], x);
        if let Some((_, lf)) = base_lf {
            base[v] = Some((base_weight, lf));
        }
        for u in 0..m {
            let p = pi.get(file, u);
            let found = if p == 0.0 {
                base_lf
            } else {
                best_log_factor(model, v, base_load + f.arrival_rate * p, t[v], x)
            };
            if let Some((tv, lf)) = found {
                t_new[u][v] = tv;
                log_new[u][v] = Some(lf);
            }
        }
    }
    // common scale: the largest term that can appear
    let mut shift = f64::NEG_INFINITY;
    for v in 0..m {
        if let Some((w, lf)) = base[v] {
            if w > 0.0 {
                shift = shift.max(w.ln() + lf);
            }
        }
        for u in 0..m {
            if let Some(lf) = log_new[u][v] {
                let w = base[v].map_or(0.0, |b| b.0) + f.weight * pi.get(file, u);
                if w > 0.0 {
                    shift = shift.max(w.ln() + lf);
                }
            }
        }
    }
    if !shift.is_finite() {
        shift = 0.0;
    }
    let mut d = vec![vec![0.0; m]; m];
    let mut infeasible = Vec::new();
    let mut max_finite: f64 = 0.0;
    for u in 0..m {
        let own = f.weight * pi.get(file, u);
        for v in 0..m {
            match (log_new[u][v], base[v]) {
                (Some(lf), Some((w, lb))) => {
                    let mine = if own > 0.0 {
                        (own.ln() + lf - shift).exp()
                    } else {
                        0.0
                    };
                    let others = if w > 0.0 {
                        (w.ln() + lb - shift).exp() * (lf - lb).exp_m1()
                    } else {
                        0.0
                    };
                    d[u][v] = mine + others;
                    max_finite = max_finite.max(d[u][v].abs());
                }
                _ => infeasible.push((u, v)),
            }
        }
    }
    let penalty = PENALTY_FACTOR * (m as f64 + 1.0) * (1.0 + max_finite);
    for (u, v) in infeasible {
        d[u][v] = penalty;
    }
    (d, t_new)
}

/// One placement pass over all files in a random order. For each file the
/// assignment is solved with every destination's exponent refit for its new
/// load; the permutation and the refit exponents are kept only if the
/// weighted objective does not increase. Returns the number of files moved.
pub fn optimize_placement<R: Rng>(
    pi: &mut AccessMatrix,
    model: &mut SystemModel,
    t: &mut AuxVector,
    x: f64,
    rng: &mut R,
) -> Result<usize> {
    let mut order: Vec<usize> = (0..model.num_files()).collect();
    order.shuffle(rng);
    let mut current = log_weighted_objective(pi, t, x, model)?;
    let mut moved = 0;
    for i in order {
        let (d, t_new) = refit_costs(i, pi, t, model, x);
        let a = hungarian(&d);
        if a.assignment.iter().enumerate().all(|(u, &v)| u == v) {
            continue;
        }
        let mut cand_pi = pi.clone();
        let mut cand_model = model.clone();
        permute_file(&mut cand_pi, &mut cand_model, i, &a.assignment);
        let mut cand_t = t.clone();
        for (u, &v) in a.assignment.iter().enumerate() {
            cand_t.0[v] = t_new[u][v];
        }
        if crate::projection::check_joint_feasibility(&cand_pi, &cand_t, &cand_model).is_err() {
            continue;
        }
        let value = log_weighted_objective(&cand_pi, &cand_t, x, &cand_model)?;
        if value <= current {
            *pi = cand_pi;
            *model = cand_model;
            *t = cand_t;
            current = value;
            moved += 1;
        }
    }
    Ok(moved)
}
