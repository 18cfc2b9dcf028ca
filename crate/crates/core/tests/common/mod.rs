//! Generators and independent oracles shared by the integration tests and
//! the acceptance gate. Every check returns the measured quantity so callers
//! decide the tolerance.
#![allow(dead_code)]

use ectail::bounds::{
    feasible_t_interval, log_weighted_objective, node_factor, pk_mean_sojourn, sojourn_mgf,
};
use ectail::model::aggregate_arrival;
use ectail::optimizer::hungarian;
use ectail::optimizer::pi_opt::scaled_objective_and_gradient;
use ectail::projection::{nearest_feasible_init, FeasibleRegion};
use ectail::sim::{run_simulation, sample_access_set, SimConfig};
use ectail::{AccessMatrix, AuxVector, FileClass, NodeParams, SystemModel};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random heterogeneous system whose chunk demand is `load` times the summed
/// mean service rates. Draws again until a feasible start exists.
pub fn random_model<R: Rng>(rng: &mut R, r: usize, m: usize, load: f64) -> SystemModel {
    loop {
        let nodes: Vec<NodeParams> = (0..m)
            .map(|_| {
                NodeParams::new(rng.random_range(5.0..30.0), rng.random_range(0.001..0.03)).unwrap()
            })
            .collect();
        let raw_w: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
        let wsum: f64 = raw_w.iter().sum();
        let mut files: Vec<FileClass> = raw_w
            .iter()
            .map(|w| {
                let n = rng.random_range(1..=m);
                let k = rng.random_range(1..=n);
                let mut placement = sample(rng, m, n).into_vec();
                placement.sort_unstable();
                FileClass {
                    code_n: n,
                    code_k: k,
                    arrival_rate: rng.random_range(0.5..1.5),
                    weight: w / wsum,
                    placement,
                }
            })
            .collect();
        let demand: f64 = files.iter().map(|f| f.arrival_rate * f.code_k as f64).sum();
        let capacity: f64 = nodes.iter().map(|n| n.mean_rate()).sum();
        for f in &mut files {
            f.arrival_rate *= load * capacity / demand;
        }
        let model = SystemModel {
            nodes,
            files,
            epsilon: 1e-6,
        };
        if model.validate().is_ok() && nearest_feasible_init(&model).is_ok() {
            return model;
        }
    }
}

/// Random jointly feasible `(pi, t)`: a random matrix projected at the
/// default start's `t`, then each `t_j` drawn from its feasible interval.
pub fn random_feasible_point<R: Rng>(
    model: &SystemModel,
    rng: &mut R,
) -> (AccessMatrix, AuxVector) {
    let (_, t0) = nearest_feasible_init(model).unwrap();
    let region = FeasibleRegion::new(model, &t0).unwrap();
    let mut raw = AccessMatrix::zeros(model.num_files(), model.num_nodes());
    for (i, f) in model.files.iter().enumerate() {
        for &j in &f.placement {
            raw.set(i, j, rng.random_range(0.0..1.5));
        }
    }
    let pi = region.project(&raw).unwrap();
    let loads = aggregate_arrival(&pi, &model.files);
    let t = model
        .nodes
        .iter()
        .zip(&loads)
        .map(|(node, &l)| {
            let (lo, hi) = feasible_t_interval(node, l, model.epsilon).unwrap();
            lo + (hi - lo) * rng.random_range(0.02..0.98)
        })
        .collect();
    (pi, AuxVector(t))
}

pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                rec(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

/// Largest |Hungarian cost - permutation minimum| over random matrices with
/// sizes 1..=7; every fourth matrix has small integer entries to force ties.
pub fn hungarian_max_gap(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let m = 1 + trial % 7;
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if trial % 4 == 0 {
                            rng.random_range(-2..3) as f64
                        } else {
                            rng.random_range(-5.0..20.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let got = hungarian(&cost);
        let mut cols = got.assignment.clone();
        cols.sort_unstable();
        assert_eq!(cols, (0..m).collect::<Vec<_>>(), "not a permutation");
        worst = worst.max((got.cost - brute_force_assignment(&cost)).abs());
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean projection onto `region` by a dense QP solve: Hildreth's dual
/// coordinate ascent picks the active set, then the equality-constrained
/// problem on that set is solved exactly and certified by the KKT conditions.
pub fn qp_projection_oracle(region: &FeasibleRegion, pi0: &AccessMatrix) -> AccessMatrix {
    let vars: Vec<(usize, usize)> = region
        .supports
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
        .collect();
    let n = vars.len();
    // (normal, bound, is_equality)
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (i, &k) in region.targets.iter().enumerate() {
        rows.push((
            vars.iter()
                .map(|&(r, _)| if r == i { 1.0 } else { 0.0 })
                .collect(),
            k,
            true,
        ));
    }
    for v in 0..n {
        let mut a = vec![0.0; n];
        a[v] = 1.0;
        rows.push((a.clone(), 1.0, false));
        a[v] = -1.0;
        rows.push((a, 0.0, false));
    }
    for (j, &cap) in region.caps.iter().enumerate() {
        let a: Vec<f64> = vars
            .iter()
            .map(|&(i, c)| if c == j { region.rates[i] } else { 0.0 })
            .collect();
        if a.iter().any(|&v| v != 0.0) {
            rows.push((a, cap, false));
        }
    }
    let z0: Vec<f64> = vars.iter().map(|&(i, j)| pi0.get(i, j)).collect();

    let mut y = vec![0.0; rows.len()];
    let mut z = z0.clone();
    for _ in 0..200_000 {
        let mut moved: f64 = 0.0;
        for (k, (a, b, eq)) in rows.iter().enumerate() {
            let mut d = (dot(a, &z) - b) / dot(a, a);
            if !eq {
                d = d.max(-y[k]);
            }
            if d != 0.0 {
                y[k] += d;
                for (zv, av) in z.iter_mut().zip(a) {
                    *zv -= d * av;
                }
                moved = moved.max(d.abs());
            }
        }
        if moved < 1e-15 {
            break;
        }
    }

    let kkt_ok = |z: &[f64], mult: &[(usize, f64)]| {
        let primal = rows.iter().all(|(a, b, eq)| {
            let r = dot(a, z) - b;
            if *eq {
                r.abs() < 1e-9
            } else {
                r < 1e-9
            }
        });
        primal && mult.iter().all(|&(k, y)| rows[k].2 || y > -1e-9)
    };

    let active: Vec<usize> = (0..rows.len())
        .filter(|&k| rows[k].2 || y[k] > 1e-12)
        .collect();
    let a = DMatrix::from_fn(active.len(), n, |r, c| rows[active[r]].0[c]);
    let b = DVector::from_iterator(active.len(), active.iter().map(|&k| rows[k].1));
    let z0v = DVector::from_column_slice(&z0);
    let gram = &a * a.transpose();
    let rhs = &a * &z0v - b;
    let exact = gram.svd(true, true).solve(&rhs, 1e-12).ok().map(|mult| {
        let zs = &z0v - a.transpose() * &mult;
        let pairs: Vec<(usize, f64)> = active.iter().copied().zip(mult.iter().copied()).collect();
        (zs.as_slice().to_vec(), pairs)
    });
    let solution = match exact {
        Some((zs, pairs)) if kkt_ok(&zs, &pairs) => zs,
        // dependent active rows: fall back to the dual iterate, whose
        // stationarity holds by construction
        _ => {
            let pairs: Vec<(usize, f64)> = y.iter().copied().enumerate().collect();
            assert!(kkt_ok(&z, &pairs), "QP oracle failed its KKT certificate");
            for (k, (a, b, eq)) in rows.iter().enumerate() {
                if !eq {
                    assert!(
                        y[k] * (b - dot(a, &z)) < 1e-9,
                        "complementary slackness violated"
                    );
                }
            }
            z
        }
    };
    let mut out = AccessMatrix::zeros(pi0.rows(), pi0.cols());
    for (&(i, j), v) in vars.iter().zip(solution) {
        out.set(i, j, v);
    }
    out
}

/// Random small projection instance with `r * m <= 12`, caps tight enough to
/// bind often.
pub fn random_projection_instance<R: Rng>(rng: &mut R) -> (SystemModel, AuxVector, AccessMatrix) {
    const SHAPES: [(usize, usize); 8] = [
        (1, 4),
        (1, 12),
        (2, 3),
        (2, 6),
        (3, 2),
        (3, 4),
        (4, 3),
        (6, 2),
    ];
    loop {
        let (r, m) = SHAPES[rng.random_range(0..SHAPES.len())];
        let nodes: Vec<NodeParams> = (0..m)
            .map(|_| {
                NodeParams::new(rng.random_range(4.0..12.0), rng.random_range(0.0..0.05)).unwrap()
            })
            .collect();
        let files: Vec<FileClass> = (0..r)
            .map(|_| {
                let n = rng.random_range(1..=m);
                let k = rng.random_range(1..=n);
                let mut placement = sample(rng, m, n).into_vec();
                placement.sort_unstable();
                FileClass {
                    code_n: n,
                    code_k: k,
                    arrival_rate: rng.random_range(1.0..3.0),
                    weight: 1.0 / r as f64,
                    placement,
                }
            })
            .collect();
        let model = SystemModel {
            nodes,
            files,
            epsilon: 1e-6,
        };
        let t = AuxVector(
            model
                .nodes
                .iter()
                .map(|n| n.rate_alpha * rng.random_range(0.2..0.9))
                .collect(),
        );
        let Ok(region) = FeasibleRegion::new(&model, &t) else {
            continue;
        };
        let demand: f64 = region
            .rates
            .iter()
            .zip(&region.targets)
            .map(|(l, k)| l * k)
            .sum();
        if demand > 0.9 * region.caps.iter().sum::<f64>() {
            continue;
        }
        let mut pi0 = AccessMatrix::zeros(r, m);
        for (i, f) in model.files.iter().enumerate() {
            for &j in &f.placement {
                pi0.set(i, j, rng.random_range(-0.5..1.5));
            }
        }
        // the region must be nonempty for the comparison to mean anything
        if region.project(&pi0).is_err() {
            continue;
        }
        return (model, t, pi0);
    }
}

/// Largest entrywise gap between the library projection and the QP oracle.
pub fn projection_max_gap(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (model, t, pi0) = random_projection_instance(&mut rng);
        let region = FeasibleRegion::new(&model, &t).unwrap();
        let got = region.project(&pi0).unwrap();
        let want = qp_projection_oracle(&region, &pi0);
        let gap = got
            .as_slice()
            .iter()
            .zip(want.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    worst
}

/// Pooled chi-square statistic of inclusion counts against `N pi_j` and its
/// 1% critical value. The `N k` inclusions are treated as categorical draws
/// with probabilities `pi_j / k`; a fixed-size design has smaller count
/// variances than that, so the test is conservative.
pub fn inclusion_chi_square(pi_row: &[f64], k: usize, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let mut counts = vec![0usize; pi_row.len()];
    for _ in 0..draws {
        let set = sample_access_set(pi_row, k, &mut rng).unwrap();
        assert_eq!(set.len(), k);
        for j in set {
            counts[j] += 1;
        }
    }
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(pi_row) {
        if p == 0.0 {
            assert_eq!(c, 0, "zero-probability node sampled");
            continue;
        }
        let e = draws as f64 * p;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    let df = (cells - 1).max(1) as f64;
    (stat, ChiSquared::new(df).unwrap().inverse_cdf(0.99))
}

/// Batch-means estimate of the mean and its standard error; robust to the
/// serial correlation of queue sojourn times.
pub fn batch_mean(samples: &[f64], batches: usize) -> (f64, f64) {
    let size = samples.len() / batches;
    let means: Vec<f64> = samples
        .chunks_exact(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

pub fn single_node_model(alpha: f64, beta: f64, lambda: f64) -> SystemModel {
    SystemModel {
        nodes: vec![NodeParams::new(alpha, beta).unwrap()],
        files: vec![FileClass {
            code_n: 1,
            code_k: 1,
            arrival_rate: lambda,
            weight: 1.0,
            placement: vec![0],
        }],
        epsilon: 1e-6,
    }
}

/// Simulated sojourn times of a single M/G/1 node in arrival order.
pub fn single_node_sojourns(
    alpha: f64,
    beta: f64,
    lambda: f64,
    requests: usize,
    seed: u64,
) -> Vec<f64> {
    let model = single_node_model(alpha, beta, lambda);
    let pi = AccessMatrix::from_rows(&[vec![1.0]]);
    let cfg = SimConfig {
        requests,
        warmup: 0.1,
        seed,
        replications: 1,
        record_trace: false,
    };
    let mut res = run_simulation(&model, &pi, &cfg).unwrap();
    std::mem::take(&mut res.node_sojourns[0])
}

/// `(simulated mean, standard error, PK mean)`.
pub fn pk_mean_check(
    alpha: f64,
    beta: f64,
    lambda: f64,
    requests: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let q = single_node_sojourns(alpha, beta, lambda, requests, seed);
    let (mean, se) = batch_mean(&q, 50);
    let node = NodeParams::new(alpha, beta).unwrap();
    (mean, se, pk_mean_sojourn(lambda, &node).unwrap())
}

/// `(t, simulated E[e^{tQ}], standard error, transform value)` per `t`.
pub fn sojourn_mgf_check(
    alpha: f64,
    beta: f64,
    lambda: f64,
    ts: &[f64],
    requests: usize,
    seed: u64,
) -> Vec<(f64, f64, f64, f64)> {
    let q = single_node_sojourns(alpha, beta, lambda, requests, seed);
    let node = NodeParams::new(alpha, beta).unwrap();
    ts.iter()
        .map(|&t| {
            let e: Vec<f64> = q.iter().map(|s| (t * s).exp()).collect();
            let (mean, se) = batch_mean(&e, 50);
            (t, mean, se, sojourn_mgf(t, lambda, &node).unwrap())
        })
        .collect()
}

/// Smallest second central difference of the node tail factor in `t` over
/// random feasible `(Lambda, x, t)` triples, spacing `1e-4 t_max`.
pub fn min_t_second_difference<R: Rng>(node: &NodeParams, trials: usize, rng: &mut R) -> f64 {
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let lambda = node.stability_limit() * rng.random_range(0.0..0.9);
        let x = rng.random_range(0.01..1.0);
        let (lo, hi) = feasible_t_interval(node, lambda, 1e-6).unwrap();
        let h = 1e-4 * hi;
        let t = rng.random_range((lo + h)..(hi - h));
        let f = |t: f64| node_factor(t, lambda, node, x).unwrap();
        worst = worst.min(f(t - h) + f(t + h) - 2.0 * f(t));
    }
    worst
}

/// Smallest second central difference in `Lambda` of
/// `Lambda (1 - rho) / (t - Lambda (M(t) - 1))`, evaluated through the node
/// factor at `x = 0`, over random `t` and `Lambda` below both the stability
/// limit and the transform's pole.
pub fn min_lambda_second_difference<R: Rng>(node: &NodeParams, trials: usize, rng: &mut R) -> f64 {
    let mut worst = f64::INFINITY;
    let m1 = |t: f64| node.rate_alpha / (node.rate_alpha - t) * (node.shift_beta * t).exp() - 1.0;
    for _ in 0..trials {
        let t = node.rate_alpha * rng.random_range(0.01..0.95);
        let upper = node.stability_limit().min(t / m1(t)) * 0.999;
        let h = 1e-4 * upper;
        let lambda = rng.random_range(h..(upper - h));
        // node_factor = (1 - rho) t M(t) / (t - Lambda (M(t) - 1)) at x = 0
        let term = |l: f64| l * node_factor(t, l, node, 0.0).unwrap() / (t * (m1(t) + 1.0));
        worst = worst.min(term(lambda - h) + term(lambda + h) - 2.0 * term(lambda));
    }
    worst
}

/// Relative sup-norm error of the analytic `pi` gradient against central
/// differences of the objective (five-point stencil, `h = 1e-6`; near a
/// transform pole the three-point stencil's truncation error alone exceeds
/// 1e-4).
pub fn gradient_rel_error(model: &SystemModel, pi: &AccessMatrix, t: &AuxVector, x: f64) -> f64 {
    let shift = -log_weighted_objective(pi, t, x, model).unwrap();
    let (_, grad) = scaled_objective_and_gradient(pi, t, x, model, shift).unwrap();
    let h = 1e-6;
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, file) in model.files.iter().enumerate() {
        for &j in &file.placement {
            let f = |step: f64| {
                let mut p = pi.clone();
                p.set(i, j, pi.get(i, j) + step);
                (log_weighted_objective(&p, t, x, model).unwrap() + shift).exp()
            };
            let fd = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
            err = err.max((fd - grad.get(i, j)).abs());
            scale = scale.max(grad.get(i, j).abs());
        }
    }
    err / scale.max(1e-300)
}
