//! Euclidean projection of scheduling probabilities onto the feasible set
//!
//! ```text
//! { pi : sum_j pi_ij = k_i, 0 <= pi_ij <= 1, pi_ij = 0 off S_i,
//!        sum_i lambda_i pi_ij <= cap_j(t) }
//! ```
//!
//! The row constraints (one capped simplex per file) and the column caps
//! (one halfspace per node) couple only through the cap multipliers, so the
//! projection is solved as a small bound-constrained dual in those multipliers.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::dinics;
use petgraph::Graph;

use crate::bounds::FixedTNode;
use crate::error::{Error, Result};
use crate::model::{aggregate_arrival, AccessMatrix, AuxVector, SystemModel, ROW_SUM_TOL};

/// Newton iterations on the cap multipliers before giving up.
pub const MAX_ITERATIONS: usize = 500;
/// Step halvings per Newton iteration.
const MAX_BACKTRACKS: usize = 60;
/// Sufficient-increase factor of the Armijo test on the dual.
const ARMIJO: f64 = 1e-4;
/// Upper limit on the band of near-zero multipliers held at the bound.
const BOUND_EPS: f64 = 1e-6;
/// Ridge added to the Newton system, relative to its largest diagonal.
const RIDGE: f64 = 1e-12;
/// Largest accepted violation of the tightened caps.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// KKT residual aimed for, relative to the largest cap; `RESIDUAL_TOL` is
/// accepted when floating point stalls the ascent first.
const OPTIMALITY_TOL: f64 = 1e-13;
/// Caps are tightened by up to this much inside the solver so that a point
/// within `RESIDUAL_TOL` of the tightened caps still satisfies the true ones.
const CAP_GUARD: f64 = 2e-9;
/// Relative shortfall of the max flow still counted as serving all demand.
const FLOW_TOL: f64 = 1e-13;

/// Initial auxiliary exponent used for initialization and projected baselines.
pub const INIT_T: f64 = 0.01;

/// Projects `v` onto `{0 <= p <= 1, sum p = k}`.
///
/// The solution is `p_j = clamp(v_j - mu, 0, 1)`. The shift `mu` is located by
/// bisection over the sorted breakpoints of the piecewise-linear row sum and
/// then solved exactly on the bracketing segment.
pub fn project_capped_simplex(v: &[f64], k: f64) -> Vec<f64> {
    let n = v.len();
    assert!(
        k >= 0.0 && k <= n as f64 + 1e-12,
        "k={k} out of range for n={n}"
    );
    if n == 0 {
        return Vec::new();
    }
    let sum_at = |mu: f64| -> f64 { v.iter().map(|&x| (x - mu).clamp(0.0, 1.0)).sum() };

    let mut bps: Vec<f64> = v.iter().flat_map(|&x| [x, x - 1.0]).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    // sum_at is nonincreasing: n at bps[0], 0 at bps[last]
    let (mut lo, mut hi) = (0usize, bps.len() - 1);
    if sum_at(bps[lo]) <= k {
        return v.iter().map(|&x| (x - bps[lo]).clamp(0.0, 1.0)).collect();
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if sum_at(bps[mid]) >= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (bps[lo], bps[hi]);
    let probe = 0.5 * (a + b);
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut ones = 0usize;
    for &x in v {
        if x - probe >= 1.0 {
            ones += 1;
        } else if x - probe > 0.0 {
            free += 1;
            free_sum += x;
        }
    }
    let mu = if free == 0 {
        a
    } else {
        ((free_sum + ones as f64 - k) / free as f64).clamp(a, b)
    };
    v.iter().map(|&x| (x - mu).clamp(0.0, 1.0)).collect()
}

/// The feasible polytope for a fixed auxiliary vector `t`.
#[derive(Debug, Clone)]
pub struct FeasibleRegion {
    /// Node indices each file may use.
    pub supports: Vec<Vec<usize>>,
    /// Required row sums `k_i`.
    pub targets: Vec<f64>,
    /// Per-file arrival rates (the halfspace normals).
    pub rates: Vec<f64>,
    /// Load caps `Lambda_j <= cap_j(t)`, equivalent to `margin_j <= -epsilon`.
    pub caps: Vec<f64>,
}

impl FeasibleRegion {
    pub fn new(model: &SystemModel, t: &AuxVector) -> Result<Self> {
        let mut caps = Vec::with_capacity(model.num_nodes());
        for (j, node) in model.nodes.iter().enumerate() {
            if !(t[j] > 0.0 && t[j] < node.rate_alpha) {
                return Err(Error::InfeasibleT {
                    node: j,
                    margin: crate::bounds::stability_margin(t[j], 0.0, node),
                });
            }
            let cap = FixedTNode::new(node, t[j], 0.0).cap(model.epsilon);
            if cap < 0.0 {
                return Err(Error::InfeasibleT {
                    node: j,
                    margin: crate::bounds::stability_margin(t[j], 0.0, node),
                });
            }
            caps.push(cap);
        }
        Ok(Self {
            supports: model.files.iter().map(|f| f.placement.clone()).collect(),
            targets: model.files.iter().map(|f| f.code_k as f64).collect(),
            rates: model.files.iter().map(|f| f.arrival_rate).collect(),
            caps,
        })
    }

    /// Largest total load the caps, reduced by `guard`, can absorb: a max
    /// flow from files (supply `lambda_i k_i`, at most `lambda_i` per node)
    /// to nodes.
    fn servable(&self, guard: f64) -> f64 {
        let mut graph = Graph::<(), f64>::new();
        let source = graph.add_node(());
        let sink = graph.add_node(());
        let nodes: Vec<_> = self
            .caps
            .iter()
            .map(|&c| {
                let v = graph.add_node(());
                graph.add_edge(v, sink, (c - guard).max(0.0));
                v
            })
            .collect();
        for (i, support) in self.supports.iter().enumerate() {
            let f = graph.add_node(());
            graph.add_edge(source, f, self.rates[i] * self.targets[i]);
            for &j in support {
                graph.add_edge(f, nodes[j], self.rates[i]);
            }
        }
        dinics(&graph, source, sink).0
    }

    /// Cap reduction used inside the solver: `CAP_GUARD`, or half the largest
    /// reduction that leaves the region nonempty when that is smaller.
    fn guard(&self, demand: f64) -> Result<f64> {
        let tol = FLOW_TOL * (1.0 + demand);
        let fits = |g: f64| self.servable(g) >= demand - tol;
        if fits(CAP_GUARD) {
            return Ok(CAP_GUARD);
        }
        if !fits(0.0) {
            return Err(Error::InfeasibleRegion {
                demand,
                capacity: self.servable(0.0),
            });
        }
        let (mut lo, mut hi) = (0.0, CAP_GUARD);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * lo)
    }

    /// Row `i` of the projection for cap multipliers `mu`, over its support.
    fn row_at(&self, i: usize, base: &[f64], mu: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = base
            .iter()
            .zip(&self.supports[i])
            .map(|(b, &j)| b - self.rates[i] * mu[j])
            .collect();
        project_capped_simplex(&v, self.targets[i])
    }

    /// Largest cap violation of `pi`.
    pub fn cap_violation(&self, pi: &AccessMatrix) -> f64 {
        let loads = self.loads(pi);
        loads
            .iter()
            .zip(&self.caps)
            .map(|(l, c)| (l - c).max(0.0))
            .fold(0.0, f64::max)
    }

    fn loads(&self, pi: &AccessMatrix) -> Vec<f64> {
        let mut out = vec![0.0; pi.cols()];
        for (i, support) in self.supports.iter().enumerate() {
            for &j in support {
                out[j] += self.rates[i] * pi.get(i, j);
            }
        }
        out
    }

    /// True if `pi` satisfies every constraint (rows within `ROW_SUM_TOL`).
    pub fn contains(&self, pi: &AccessMatrix) -> bool {
        for (i, support) in self.supports.iter().enumerate() {
            let row = pi.row(i);
            let mut sum = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return false;
                }
                if p != 0.0 && support.binary_search(&j).is_err() {
                    return false;
                }
                sum += p;
            }
            if (sum - self.targets[i]).abs() > ROW_SUM_TOL {
                return false;
            }
        }
        self.cap_violation(pi) == 0.0
    }

    /// Euclidean projection of `pi0` onto this region.
    ///
    /// Solved in the dual: for multipliers `mu_j >= 0` on the caps, each row
    /// of the projection is the capped-simplex projection of
    /// `pi0_i - lambda_i mu`. The concave dual is piecewise quadratic in `mu`
    /// and is maximized by projected Newton steps until the KKT conditions
    /// hold; a step is exact once the active pattern is right.
    pub fn project(&self, pi0: &AccessMatrix) -> Result<AccessMatrix> {
        if self.contains(pi0) {
            return Ok(pi0.clone());
        }
        let demand: f64 = self
            .rates
            .iter()
            .zip(&self.targets)
            .map(|(l, k)| l * k)
            .sum();
        let capacity: f64 = self.caps.iter().sum();
        if demand > capacity {
            return Err(Error::InfeasibleRegion { demand, capacity });
        }

        let m = pi0.cols();
        let base: Vec<Vec<f64>> = self
            .supports
            .iter()
            .enumerate()
            .map(|(i, support)| support.iter().map(|&j| pi0.get(i, j)).collect())
            .collect();
        let guard = self.guard(demand)?;
        let caps: Vec<f64> = self.caps.iter().map(|c| c - guard).collect();
        let mut mu = vec![0.0; m];
        let mut state = self.dual_state(&base, &mu, &caps);

        let target = OPTIMALITY_TOL * (1.0 + self.caps.iter().fold(0.0, |a: f64, &c| a.max(c)));
        let mut residual = f64::INFINITY;
        for _ in 0..MAX_ITERATIONS {
            let grad: Vec<f64> = state.loads.iter().zip(&caps).map(|(l, c)| l - c).collect();
            residual = grad
                .iter()
                .zip(&mu)
                .map(|(&g, &u)| if u > 0.0 { g.abs() } else { g.max(0.0) })
                .fold(0.0, f64::max);
            let acceptable = residual < RESIDUAL_TOL && grad.iter().all(|&g| g <= 0.5 * guard);
            if acceptable && residual <= target {
                return Ok(self.assemble(&state.rows, pi0.rows(), m));
            }

            // multipliers held at zero: on the bound, or close to it, with
            // the gradient pushing them down
            let width = mu
                .iter()
                .zip(&grad)
                .map(|(&u, &g)| (u - (u + g).max(0.0)).abs())
                .fold(0.0, f64::max)
                .min(BOUND_EPS);
            let free: Vec<usize> = (0..m)
                .filter(|&j| !(mu[j] <= width && grad[j] < 0.0))
                .collect();
            let mut dir = grad.clone();
            if !free.is_empty() {
                let step = self.newton_step(&state.rows, &free, &grad);
                for (&j, d) in free.iter().zip(step) {
                    dir[j] = d;
                }
            }

            // Armijo search along the projected arc
            let noise = 8.0 * f64::EPSILON * (1.0 + state.value.abs());
            let mut s = 1.0;
            let mut next = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<f64> = mu
                    .iter()
                    .zip(&dir)
                    .map(|(u, d)| (u + s * d).max(0.0))
                    .collect();
                let gain: f64 = grad
                    .iter()
                    .zip(trial.iter().zip(&mu))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                let cand = self.dual_state(&base, &trial, &caps);
                if cand.value >= state.value + ARMIJO * gain - noise {
                    next = Some((trial, cand));
                    break;
                }
                s *= 0.5;
            }
            let Some((trial, cand)) = next else {
                // no further ascent resolvable in floating point
                if acceptable {
                    return Ok(self.assemble(&state.rows, pi0.rows(), m));
                }
                break;
            };
            mu = trial;
            state = cand;
        }
        Err(Error::ProjectionDiverged {
            iterations: MAX_ITERATIONS,
            residual,
        })
    }

    fn assemble(&self, rows: &[Vec<f64>], r: usize, m: usize) -> AccessMatrix {
        let mut out = AccessMatrix::zeros(r, m);
        for (i, support) in self.supports.iter().enumerate() {
            for (&j, &p) in support.iter().zip(&rows[i]) {
                out.set(i, j, p);
            }
        }
        out
    }

    /// Rows, loads and dual value at multipliers `mu`.
    fn dual_state(&self, base: &[Vec<f64>], mu: &[f64], caps: &[f64]) -> DualState {
        let rows: Vec<Vec<f64>> = (0..base.len())
            .map(|i| self.row_at(i, &base[i], mu))
            .collect();
        let mut loads = vec![0.0; caps.len()];
        let mut value = 0.0;
        for (i, support) in self.supports.iter().enumerate() {
            for ((&j, &p), &b) in support.iter().zip(&rows[i]).zip(&base[i]) {
                loads[j] += self.rates[i] * p;
                value += 0.5 * (p - b) * (p - b);
            }
        }
        value += mu
            .iter()
            .zip(loads.iter().zip(caps))
            .map(|(u, (l, c))| u * (l - c))
            .sum::<f64>();
        DualState { rows, loads, value }
    }

    /// Newton direction on the `free` multipliers. The negated dual Hessian
    /// is `sum_i lambda_i^2 (I - 11'/|F_i|)` over each row's entries strictly
    /// inside (0, 1); a small ridge keeps it invertible along flat directions.
    fn newton_step(&self, rows: &[Vec<f64>], free: &[usize], grad: &[f64]) -> Vec<f64> {
        let m = grad.len();
        let mut slot = vec![usize::MAX; m];
        for (a, &j) in free.iter().enumerate() {
            slot[j] = a;
        }
        let n = free.len();
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (i, support) in self.supports.iter().enumerate() {
            let inner: Vec<usize> = support
                .iter()
                .zip(&rows[i])
                .filter(|&(_, &p)| p > 0.0 && p < 1.0)
                .map(|(&j, _)| j)
                .collect();
            if inner.is_empty() {
                continue;
            }
            let w = self.rates[i] * self.rates[i];
            let share = w / inner.len() as f64;
            for &a in &inner {
                let sa = slot[a];
                if sa == usize::MAX {
                    continue;
                }
                h[(sa, sa)] += w;
                for &b in &inner {
                    if slot[b] != usize::MAX {
                        h[(sa, slot[b])] -= share;
                    }
                }
            }
        }
        let g = DVector::from_iterator(n, free.iter().map(|&j| grad[j]));
        let scale = (0..n).map(|a| h[(a, a)]).fold(0.0, f64::max).max(1.0);
        let mut ridge = RIDGE * scale;
        loop {
            let mut reg = h.clone();
            for a in 0..n {
                reg[(a, a)] += ridge;
            }
            if let Some(chol) = reg.cholesky() {
                return chol.solve(&g).iter().copied().collect();
            }
            ridge *= 10.0;
        }
    }
}

struct DualState {
    rows: Vec<Vec<f64>>,
    loads: Vec<f64>,
    value: f64,
}

/// Projects `pi0` onto the feasible set defined by `t`; returns `pi0`
/// unchanged when it is already feasible.
pub fn project_feasible(
    pi0: &AccessMatrix,
    t: &AuxVector,
    model: &SystemModel,
) -> Result<AccessMatrix> {
    FeasibleRegion::new(model, t)?.project(pi0)
}

/// Starting point: `pi_ij = k_i / n_i` on each placement projected onto the
/// feasible set at `t_j = 0.01`. If that set is empty, `t` is halved until it
/// is not.
pub fn nearest_feasible_init(model: &SystemModel) -> Result<(AccessMatrix, AuxVector)> {
    feasible_start(&AccessMatrix::equal_access(model), model)
}

/// Projects an arbitrary starting matrix at `t_j = 0.01`, halving `t` while
/// the feasible set is empty.
pub fn feasible_start(
    start: &AccessMatrix,
    model: &SystemModel,
) -> Result<(AccessMatrix, AuxVector)> {
    let mut t = AuxVector::constant(model.num_nodes(), INIT_T);
    let mut last_err = None;
    for _ in 0..40 {
        match project_feasible(start, &t, model) {
            Ok(pi) => return Ok((pi, t)),
            Err(e @ (Error::InfeasibleRegion { .. } | Error::ProjectionDiverged { .. })) => {
                log::debug!("initial projection failed at t={}: {e}", t[0]);
                last_err = Some(e);
                for tj in &mut t.0 {
                    *tj *= 0.5;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::InfeasibleRegion {
        demand: model.chunk_demand(),
        capacity: 0.0,
    }))
}

/// Checks that `(pi, t)` is jointly feasible: matrix invariants plus
/// `margin_j <= -epsilon` at every node.
pub fn check_joint_feasibility(
    pi: &AccessMatrix,
    t: &AuxVector,
    model: &SystemModel,
) -> Result<()> {
    pi.check(model)?;
    let loads = aggregate_arrival(pi, &model.files);
    for (j, node) in model.nodes.iter().enumerate() {
        let margin = crate::bounds::stability_margin(t[j], loads[j], node);
        if margin > -model.epsilon {
            return Err(Error::InfeasibleT { node: j, margin });
        }
    }
    Ok(())
}
