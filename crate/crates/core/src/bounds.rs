//! Closed-form latency tail bounds for probabilistic scheduling over M/G/1
//! nodes with shifted-exponential service.
//!
//! The per-node building block is the Chernoff-style factor
//!
//! ```text
//! g_j(t, Lambda) = e^{-t x} E[e^{t Q_j}]
//!               = (1 - rho) * alpha * t * e^{(beta - x) t} / (-margin(t, Lambda))
//! ```
//!
//! where `margin = t (t - alpha + Lambda) + Lambda alpha (e^{beta t} - 1)`.
//! The `(alpha - t)` pole of the service MGF cancels against the denominator
//! of the sojourn transform, so everything is evaluated in log space and no
//! intermediate quantity overflows as `t` approaches the feasibility limit.

use crate::error::{Error, Result};
use crate::model::{
    aggregate_arrival, traffic_intensity, weighted_access, AccessMatrix, AuxVector, NodeParams,
    SystemModel,
};

/// `ln E[e^{tX}]` for a shifted exponential, `t < alpha`.
pub fn log_mgf_shifted_exp(node: &NodeParams, t: f64) -> Result<f64> {
    if t >= node.rate_alpha {
        return Err(Error::Pole {
            t,
            alpha: node.rate_alpha,
        });
    }
    Ok(-(-t / node.rate_alpha).ln_1p() + node.shift_beta * t)
}

/// `M(t) = alpha / (alpha - t) * e^{beta t}`.
pub fn mgf_shifted_exp(node: &NodeParams, t: f64) -> Result<f64> {
    log_mgf_shifted_exp(node, t).map(f64::exp)
}

/// Stability margin; the sojourn MGF at `t` exists iff this is negative.
pub fn stability_margin(t: f64, lambda: f64, node: &NodeParams) -> f64 {
    let a = node.rate_alpha;
    t * (t - a + lambda) + lambda * a * (node.shift_beta * t).exp_m1()
}

fn margin_slope(t: f64, lambda: f64, node: &NodeParams) -> f64 {
    let a = node.rate_alpha;
    let b = node.shift_beta;
    2.0 * t - a + lambda + lambda * a * b * (b * t).exp()
}

/// Closed interval of `t` with `margin(t) <= -epsilon`.
///
/// The margin is convex in `t`, zero at `t = 0`, and has slope
/// `-alpha (1 - rho)` there, so the feasible set is an interval bracketed by
/// the margin's minimizer.
pub fn feasible_t_interval(node: &NodeParams, lambda: f64, epsilon: f64) -> Result<(f64, f64)> {
    let rho = traffic_intensity(lambda, node);
    if rho >= 1.0 {
        return Err(Error::NoFeasibleT { node: 0, rho });
    }
    let a = node.rate_alpha;
    // minimizer of the margin: slope root on (0, alpha)
    let (mut lo, mut hi) = (0.0_f64, a);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if margin_slope(mid, lambda, node) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * a {
            break;
        }
    }
    let t_star = 0.5 * (lo + hi);
    let target = -epsilon;
    if stability_margin(t_star, lambda, node) > target {
        return Err(Error::NoFeasibleT { node: 0, rho });
    }
    let root = |mut inside: f64, mut outside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if stability_margin(mid, lambda, node) <= target {
                inside = mid;
            } else {
                outside = mid;
            }
            if (outside - inside).abs() <= 4.0 * f64::EPSILON * inside.abs().max(f64::MIN_POSITIVE)
            {
                break;
            }
        }
        inside
    };
    // margin(alpha) = alpha*lambda*e^{beta alpha} > 0, so alpha is outside
    let t_hi = root(t_star, a);
    let t_lo = root(t_star, 0.0);
    Ok((t_lo, t_hi))
}

/// Supremum of `t` with `margin(t) <= -epsilon`.
pub fn t_max(node: &NodeParams, lambda: f64, epsilon: f64) -> Result<f64> {
    feasible_t_interval(node, lambda, epsilon).map(|(_, hi)| hi)
}

/// `E[e^{t Q}]` for the M/G/1 sojourn time via the Pollaczek-Khinchine transform.
pub fn sojourn_mgf(t: f64, lambda: f64, node: &NodeParams) -> Result<f64> {
    let margin = stability_margin(t, lambda, node);
    let rho = traffic_intensity(lambda, node);
    if !(margin < 0.0) || t <= 0.0 || rho >= 1.0 {
        return Err(Error::InfeasibleT { node: 0, margin });
    }
    let a = node.rate_alpha;
    let log = (1.0 - rho).ln() + t.ln() + a.ln() + node.shift_beta * t - (-margin).ln();
    Ok(log.exp())
}

/// `ln(e^{-t x} E[e^{t Q}])`, the log of the per-node tail factor.
pub fn log_node_factor(t: f64, lambda: f64, node: &NodeParams, x: f64) -> Result<f64> {
    let margin = stability_margin(t, lambda, node);
    let rho = traffic_intensity(lambda, node);
    if !(margin < 0.0) || t <= 0.0 || rho >= 1.0 {
        return Err(Error::InfeasibleT { node: 0, margin });
    }
    let a = node.rate_alpha;
    Ok((1.0 - rho).ln() + t.ln() + a.ln() + (node.shift_beta - x) * t - (-margin).ln())
}

/// Per-node tail factor `e^{-t x} E[e^{t Q}]`, an upper bound on `Pr(Q >= x)`.
pub fn node_factor(t: f64, lambda: f64, node: &NodeParams, x: f64) -> Result<f64> {
    log_node_factor(t, lambda, node, x).map(f64::exp)
}

/// The node factor as a function of the load `Lambda` at fixed `t` and `x`:
///
/// `g(Lambda) = K (1 - Lambda c1) / (a - Lambda b)`, with
/// `K = alpha t e^{(beta - x) t}`, `a = t (alpha - t)`,
/// `b = t + alpha (e^{beta t} - 1)` and `c1 = E[X]`.
#[derive(Debug, Clone, Copy)]
pub struct FixedTNode {
    pub log_k: f64,
    pub a: f64,
    pub b: f64,
    pub c1: f64,
}

impl FixedTNode {
    pub fn new(node: &NodeParams, t: f64, x: f64) -> Self {
        let alpha = node.rate_alpha;
        let beta = node.shift_beta;
        Self {
            log_k: alpha.ln() + t.ln() + (beta - x) * t,
            a: t * (alpha - t),
            b: t + alpha * (beta * t).exp_m1(),
            c1: node.mean_service(),
        }
    }

    /// `-margin` at load `lambda`.
    pub fn slack(&self, lambda: f64) -> f64 {
        self.a - lambda * self.b
    }

    /// Largest load with `margin <= -epsilon` at this `t`.
    pub fn cap(&self, epsilon: f64) -> f64 {
        (self.a - epsilon) / self.b
    }

    /// `ln g(lambda)`; `None` when the load is infeasible.
    pub fn log_value(&self, lambda: f64) -> Option<f64> {
        let slack = self.slack(lambda);
        let one_minus_rho = 1.0 - lambda * self.c1;
        if slack > 0.0 && one_minus_rho > 0.0 {
            Some(self.log_k + one_minus_rho.ln() - slack.ln())
        } else {
            None
        }
    }

    /// `g(lambda) e^{shift}` and its derivative in `lambda`, both scaled by
    /// `e^{shift}`. The exponent is clamped to keep the result finite.
    pub fn scaled_value_and_slope(&self, lambda: f64, shift: f64) -> Option<(f64, f64)> {
        let slack = self.slack(lambda);
        let one_minus_rho = 1.0 - lambda * self.c1;
        if !(slack > 0.0 && one_minus_rho > 0.0) {
            return None;
        }
        let k = (self.log_k + shift).min(MAX_EXPONENT).exp();
        let value = k * one_minus_rho / slack;
        let slope = k * (self.b - self.c1 * self.a) / (slack * slack);
        Some((value, slope))
    }
}

/// Scaled quantities are clamped at `e^{MAX_EXPONENT}` so gradients stay finite.
pub const MAX_EXPONENT: f64 = 300.0;

/// Numerically stable `ln(sum exp(v))`; `-inf` for an empty input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Computes every node's log factor for the current loads; errors name the node.
pub fn log_node_factors(
    model: &SystemModel,
    loads: &[f64],
    t: &AuxVector,
    x: f64,
) -> Result<Vec<f64>> {
    model
        .nodes
        .iter()
        .enumerate()
        .map(|(j, node)| log_node_factor(t[j], loads[j], node, x).map_err(|e| e.at_node(j)))
        .collect()
}

/// Tail bound for one file: `sum_j pi_ij e^{-t_j x} E[e^{t_j Q_j}]`.
/// The raw value may exceed one.
pub fn file_tail_bound(
    model: &SystemModel,
    file: usize,
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
) -> Result<f64> {
    let loads = aggregate_arrival(pi, &model.files);
    let mut sum = 0.0;
    for (j, &p) in pi.row(file).iter().enumerate() {
        if p > 0.0 {
            let lg =
                log_node_factor(t[j], loads[j], &model.nodes[j], x).map_err(|e| e.at_node(j))?;
            sum += p * lg.exp();
        }
    }
    Ok(sum)
}

/// Laplace-Stieltjes transform of a service-time distribution.
pub trait ServiceTransform {
    /// `E[e^{-s X}]` for `s >= 0`.
    fn lst(&self, s: f64) -> f64;
    /// `1 - E[e^{-s X}]`, which implementations can compute without cancellation.
    fn one_minus_lst(&self, s: f64) -> f64 {
        1.0 - self.lst(s)
    }
    fn mean(&self) -> f64;
}

impl ServiceTransform for NodeParams {
    fn lst(&self, s: f64) -> f64 {
        (self.log_lst(s)).exp()
    }

    fn one_minus_lst(&self, s: f64) -> f64 {
        -self.log_lst(s).exp_m1()
    }

    fn mean(&self) -> f64 {
        self.mean_service()
    }
}

impl NodeParams {
    fn log_lst(&self, s: f64) -> f64 {
        -(s / self.rate_alpha).ln_1p() - self.shift_beta * s
    }
}

/// `1 - E[e^{-s Q}]` for the M/G/1 sojourn time at load `lambda`.
pub fn one_minus_sojourn_lst(s: f64, lambda: f64, service: &dyn ServiceTransform) -> Result<f64> {
    let rho = lambda * service.mean();
    if rho >= 1.0 {
        return Err(Error::UnstableNode { node: 0, rho });
    }
    if s <= 0.0 {
        return Ok(0.0);
    }
    let oml = service.one_minus_lst(s);
    let l = 1.0 - oml;
    let denom = s - lambda * oml;
    // 1 - (1-rho) s L / (s - lambda (1-L))
    Ok((oml * (s - lambda) + rho * s * l) / denom)
}

/// `E[e^{-s Q}]` via the Pollaczek-Khinchine formula.
pub fn sojourn_lst(s: f64, lambda: f64, service: &dyn ServiceTransform) -> Result<f64> {
    one_minus_sojourn_lst(s, lambda, service).map(|v| 1.0 - v)
}

/// Transform-based tail bound for one file with arbitrary per-node service
/// transforms: `sum_j pi_ij (1 - E[e^{-s_j Q_j}]) / (1 - e^{-s_j x})`.
pub fn lst_tail_bound_with(
    services: &[&dyn ServiceTransform],
    files: &[crate::model::FileClass],
    file: usize,
    pi: &AccessMatrix,
    s: &[f64],
    x: f64,
) -> Result<f64> {
    let loads = aggregate_arrival(pi, files);
    let mut sum = 0.0;
    for (j, &p) in pi.row(file).iter().enumerate() {
        if p > 0.0 {
            if !(s[j] > 0.0) {
                return Err(Error::InvalidConfig(format!("s[{j}] must be positive")));
            }
            let num =
                one_minus_sojourn_lst(s[j], loads[j], services[j]).map_err(|e| e.at_node(j))?;
            sum += p * num / -(-s[j] * x).exp_m1();
        }
    }
    Ok(sum)
}

/// Transform-based tail bound with shifted-exponential service.
pub fn lst_tail_bound(
    model: &SystemModel,
    file: usize,
    pi: &AccessMatrix,
    s: &[f64],
    x: f64,
) -> Result<f64> {
    let services: Vec<&dyn ServiceTransform> = model
        .nodes
        .iter()
        .map(|n| n as &dyn ServiceTransform)
        .collect();
    lst_tail_bound_with(&services, &model.files, file, pi, s, x)
}

/// Mean sojourn time of an M/G/1 node (Pollaczek-Khinchine mean value formula).
pub fn pk_mean_sojourn(lambda: f64, node: &NodeParams) -> Result<f64> {
    let rho = traffic_intensity(lambda, node);
    if rho >= 1.0 {
        return Err(Error::UnstableNode { node: 0, rho });
    }
    Ok(node.mean_service() + lambda * node.second_moment() / (2.0 * (1.0 - rho)))
}

/// `ln` of the weighted objective `sum_i omega_i * file_tail_bound_i`, written
/// per node as `sum_j W_j g_j` with `W_j = sum_i omega_i pi_ij`.
pub fn log_weighted_objective(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
) -> Result<f64> {
    let loads = aggregate_arrival(pi, &model.files);
    let weights = weighted_access(pi, &model.files);
    let mut terms = Vec::with_capacity(model.num_nodes());
    for (j, node) in model.nodes.iter().enumerate() {
        if weights[j] > 0.0 {
            let lg = log_node_factor(t[j], loads[j], node, x).map_err(|e| e.at_node(j))?;
            terms.push(weights[j].ln() + lg);
        }
    }
    Ok(log_sum_exp(terms))
}

/// Weighted latency tail probability bound. Underflows to zero when the
/// bound is below `f64::MIN_POSITIVE`; use [`log_weighted_objective`] there.
pub fn weighted_objective(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
) -> Result<f64> {
    log_weighted_objective(pi, t, x, model).map(f64::exp)
}

/// Node-sum form `sum_j Lambda_j g_j / sum_i lambda_i`. Equal to
/// [`weighted_objective`] when weights are proportional to arrival rates.
pub fn node_sum_objective(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
) -> Result<f64> {
    let loads = aggregate_arrival(pi, &model.files);
    let mut sum = 0.0;
    for (j, node) in model.nodes.iter().enumerate() {
        if loads[j] > 0.0 {
            sum += loads[j] * node_factor(t[j], loads[j], node, x).map_err(|e| e.at_node(j))?;
        }
    }
    Ok(sum / model.total_arrival_rate())
}

/// Bounds for every file and the weighted objective at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Raw per-file bounds; may exceed one.
    pub per_file_bound: Vec<f64>,
    pub per_file_clipped: Vec<f64>,
    pub objective: f64,
    pub log_objective: f64,
    /// `e^{-t_j x} E[e^{t_j Q_j}]` per node.
    pub per_node_terms: Vec<f64>,
}

pub fn bound_report(
    pi: &AccessMatrix,
    t: &AuxVector,
    x: f64,
    model: &SystemModel,
) -> Result<BoundReport> {
    let loads = aggregate_arrival(pi, &model.files);
    let logs = log_node_factors(model, &loads, t, x)?;
    let per_node_terms: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let per_file_bound: Vec<f64> = (0..model.num_files())
        .map(|i| {
            pi.row(i)
                .iter()
                .zip(&per_node_terms)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, g)| p * g)
                .sum()
        })
        .collect();
    let per_file_clipped = per_file_bound.iter().map(|b| b.min(1.0)).collect();
    let log_objective = log_weighted_objective(pi, t, x, model)?;
    Ok(BoundReport {
        per_file_bound,
        per_file_clipped,
        objective: log_objective.exp(),
        log_objective,
        per_node_terms,
    })
}
