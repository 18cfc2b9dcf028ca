//! System model: storage nodes, file classes, scheduling probabilities and
//! the per-node load quantities derived from them.
//!
//! All internal quantities use seconds for time and 1/seconds for rates.
//! Scenario files give the service shift in milliseconds; it is converted
//! once, at ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum_j pi_ij == k_i`.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Default relaxation of the strict stability constraint (`margin <= -epsilon`).
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Shifted-exponential service time of one storage node: `beta + Exp(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeParams {
    /// Service rate, 1/s.
    pub rate_alpha: f64,
    /// Deterministic service shift, s.
    pub shift_beta: f64,
}

impl NodeParams {
    pub fn new(rate_alpha: f64, shift_beta: f64) -> Result<Self> {
        if !(rate_alpha > 0.0 && rate_alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "service rate must be positive, got {rate_alpha}"
            )));
        }
        if !(shift_beta >= 0.0 && shift_beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "service shift must be nonnegative, got {shift_beta}"
            )));
        }
        Ok(Self {
            rate_alpha,
            shift_beta,
        })
    }

    /// Builds a node from a rate in 1/s and a shift in milliseconds.
    pub fn from_ms(rate_alpha: f64, shift_beta_ms: f64) -> Result<Self> {
        Self::new(rate_alpha, shift_beta_ms / 1000.0)
    }

    /// Mean service time `1/alpha + beta`, seconds.
    pub fn mean_service(&self) -> f64 {
        1.0 / self.rate_alpha + self.shift_beta
    }

    /// Second moment of the service time.
    pub fn second_moment(&self) -> f64 {
        let m = self.mean_service();
        1.0 / (self.rate_alpha * self.rate_alpha) + m * m
    }

    /// Mean service rate `1 / E[X]`.
    pub fn mean_rate(&self) -> f64 {
        1.0 / self.mean_service()
    }

    /// Largest arrival rate the node can sustain (`rho = 1`).
    pub fn stability_limit(&self) -> f64 {
        self.mean_rate()
    }
}

/// One file: an `(n, k)` MDS code placed on `n` distinct nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FileClass {
    pub code_n: usize,
    pub code_k: usize,
    /// Request rate, 1/s.
    pub arrival_rate: f64,
    /// Normalized weight in the objective.
    pub weight: f64,
    /// Sorted node indices holding the file's chunks.
    pub placement: Vec<usize>,
}

impl FileClass {
    pub fn hosts(&self, node: usize) -> bool {
        self.placement.binary_search(&node).is_ok()
    }
}

/// Validated system: nodes, files and the stability relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub nodes: Vec<NodeParams>,
    pub files: Vec<FileClass>,
    pub epsilon: f64,
}

impl SystemModel {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_files(&self) -> usize {
        self.files.len()
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.files.iter().map(|f| f.arrival_rate).sum()
    }

    /// `sum_i lambda_i k_i`, the aggregate chunk-request rate.
    pub fn chunk_demand(&self) -> f64 {
        self.files
            .iter()
            .map(|f| f.arrival_rate * f.code_k as f64)
            .sum()
    }

    pub fn placements(&self) -> Vec<Vec<usize>> {
        self.files.iter().map(|f| f.placement.clone()).collect()
    }

    /// Returns a copy with the given placements (each must keep its size).
    pub fn with_placements(&self, placements: &[Vec<usize>]) -> Self {
        let mut out = self.clone();
        for (f, p) in out.files.iter_mut().zip(placements) {
            let mut p = p.clone();
            p.sort_unstable();
            debug_assert_eq!(p.len(), f.code_n);
            f.placement = p;
        }
        out
    }

    /// Returns a copy with every arrival rate multiplied by `mult`; weights are
    /// unchanged (they are scale invariant).
    pub fn scaled_rates(&self, mult: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.files {
            f.arrival_rate *= mult;
        }
        out
    }

    /// Re-checks all model invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.nodes.len();
        if m == 0 {
            return Err(Error::InvalidConfig("model has no nodes".into()));
        }
        if self.files.is_empty() {
            return Err(Error::InvalidConfig("model has no files".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        for (i, f) in self.files.iter().enumerate() {
            check_file(i, f.code_n, f.code_k, f.arrival_rate, &f.placement, m)?;
            if !(f.weight > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "file {i}: weight must be positive"
                )));
            }
        }
        let wsum: f64 = self.files.iter().map(|f| f.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "weights sum to {wsum}, expected 1"
            )));
        }
        Ok(())
    }
}

fn check_file(
    i: usize,
    n: usize,
    k: usize,
    lambda: f64,
    placement: &[usize],
    m: usize,
) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::InvalidConfig(format!(
            "file {i}: code (n={n}, k={k}) needs 1 <= k <= n"
        )));
    }
    if n > m {
        return Err(Error::InvalidConfig(format!(
            "file {i}: n={n} exceeds the number of nodes {m}"
        )));
    }
    if placement.len() != n {
        return Err(Error::InvalidConfig(format!(
            "file {i}: placement size mismatch, {} nodes for n={n}",
            placement.len()
        )));
    }
    let distinct: BTreeSet<_> = placement.iter().collect();
    if distinct.len() != placement.len() {
        return Err(Error::InvalidConfig(format!(
            "file {i}: duplicate node index in placement {placement:?}"
        )));
    }
    if let Some(bad) = placement.iter().find(|&&j| j >= m) {
        return Err(Error::InvalidConfig(format!(
            "file {i}: node index {bad} out of range (m={m})"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "file {i}: arrival rate must be positive, got {lambda}"
        )));
    }
    Ok(())
}

/// Node entry of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawNode {
    pub alpha_per_sec: f64,
    pub beta_ms: f64,
}

/// A group of `count` identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFileGroup {
    #[serde(default = "one")]
    pub count: usize,
    pub lambda_per_sec: f64,
    pub n: usize,
    pub k: usize,
    /// 0-based node indices.
    pub placement: Vec<usize>,
    /// Per-file weight override; normalized with all other weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

fn one() -> usize {
    1
}

/// Scenario description as read from disk (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConfig {
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    pub nodes: Vec<RawNode>,
    pub file_groups: Vec<RawFileGroup>,
}

fn default_eps() -> f64 {
    DEFAULT_EPSILON
}

impl RawConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

/// Turns a raw scenario into a validated [`SystemModel`].
///
/// Shifts are converted from milliseconds to seconds. Weights are
/// `lambda_i / sum(lambda)` unless every group carries an explicit weight, in
/// which case those are normalized to sum to one.
pub fn validate_system(raw: &RawConfig) -> Result<SystemModel> {
    let nodes = raw
        .nodes
        .iter()
        .map(|n| NodeParams::from_ms(n.alpha_per_sec, n.beta_ms))
        .collect::<Result<Vec<_>>>()?;
    let m = nodes.len();
    if m == 0 {
        return Err(Error::InvalidConfig("scenario has no nodes".into()));
    }
    if !(raw.epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {}",
            raw.epsilon
        )));
    }

    let with_weight = raw
        .file_groups
        .iter()
        .filter(|g| g.weight.is_some())
        .count();
    if with_weight != 0 && with_weight != raw.file_groups.len() {
        return Err(Error::InvalidConfig(
            "either every file group or none may carry a weight override".into(),
        ));
    }

    let mut files = Vec::new();
    for g in &raw.file_groups {
        if g.count == 0 {
            return Err(Error::InvalidConfig("file group with count 0".into()));
        }
        let mut placement = g.placement.clone();
        check_file(files.len(), g.n, g.k, g.lambda_per_sec, &placement, m)?;
        placement.sort_unstable();
        if let Some(w) = g.weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "weight must be positive, got {w}"
                )));
            }
        }
        for _ in 0..g.count {
            files.push(FileClass {
                code_n: g.n,
                code_k: g.k,
                arrival_rate: g.lambda_per_sec,
                weight: g.weight.unwrap_or(g.lambda_per_sec),
                placement: placement.clone(),
            });
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidConfig("scenario has no files".into()));
    }
    let wsum: f64 = files.iter().map(|f| f.weight).sum();
    for f in &mut files {
        f.weight /= wsum;
    }

    let model = SystemModel {
        nodes,
        files,
        epsilon: raw.epsilon,
    };
    model.validate()?;
    Ok(model)
}

/// Row-major `r x m` matrix of scheduling probabilities `pi_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AccessMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged access matrix");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Euclidean distance between two matrices of equal shape.
    pub fn distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `pi_ij = k_i / n_i` on each file's placement.
    pub fn equal_access(model: &SystemModel) -> Self {
        let mut pi = Self::zeros(model.num_files(), model.num_nodes());
        for (i, f) in model.files.iter().enumerate() {
            let p = f.code_k as f64 / f.code_n as f64;
            for &j in &f.placement {
                pi.set(i, j, p);
            }
        }
        pi
    }

    /// Checks box, support and row-sum invariants against `model`.
    pub fn check(&self, model: &SystemModel) -> Result<()> {
        if self.rows != model.num_files() || self.cols != model.num_nodes() {
            return Err(Error::InvalidConfig(format!(
                "access matrix is {}x{}, model is {}x{}",
                self.rows,
                self.cols,
                model.num_files(),
                model.num_nodes()
            )));
        }
        for (i, f) in model.files.iter().enumerate() {
            let row = self.row(i);
            for (j, &p) in row.iter().enumerate() {
                if !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&p) {
                    return Err(Error::InvalidConfig(format!(
                        "pi[{i}][{j}] = {p} outside [0, 1]"
                    )));
                }
                if p.abs() > 0.0 && !f.hosts(j) {
                    return Err(Error::InvalidConfig(format!(
                        "pi[{i}][{j}] = {p} but node {j} holds no chunk of file {i}"
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - f.code_k as f64).abs() > ROW_SUM_TOL {
                return Err(Error::RowSum {
                    row: i,
                    sum,
                    expected: f.code_k as f64,
                });
            }
        }
        Ok(())
    }
}

/// Per-node auxiliary exponents `t_j` (1/s).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxVector(pub Vec<f64>);

impl AuxVector {
    pub fn constant(m: usize, t: f64) -> Self {
        Self(vec![t; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for AuxVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Aggregate chunk arrival rate at each node, `Lambda_j = sum_i lambda_i pi_ij`.
pub fn aggregate_arrival(pi: &AccessMatrix, files: &[FileClass]) -> Vec<f64> {
    let mut out = vec![0.0; pi.cols()];
    for (i, f) in files.iter().enumerate() {
        for (acc, &p) in out.iter_mut().zip(pi.row(i)) {
            *acc += f.arrival_rate * p;
        }
    }
    out
}

/// Weighted access mass at each node, `W_j = sum_i omega_i pi_ij`.
pub fn weighted_access(pi: &AccessMatrix, files: &[FileClass]) -> Vec<f64> {
    let mut out = vec![0.0; pi.cols()];
    for (i, f) in files.iter().enumerate() {
        for (acc, &p) in out.iter_mut().zip(pi.row(i)) {
            *acc += f.weight * p;
        }
    }
    out
}

/// Traffic intensity `rho = Lambda (1/alpha + beta)`; unstable when `rho >= 1`.
pub fn traffic_intensity(lambda: f64, node: &NodeParams) -> f64 {
    lambda * node.mean_service()
}

pub fn is_unstable(rho: f64) -> bool {
    rho >= 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(count: usize, lambda: f64, n: usize, k: usize, placement: Vec<usize>) -> RawFileGroup {
        RawFileGroup {
            count,
            lambda_per_sec: lambda,
            n,
            k,
            placement,
            weight: None,
        }
    }

    fn nodes(m: usize) -> Vec<RawNode> {
        (0..m)
            .map(|_| RawNode {
                alpha_per_sec: 20.0,
                beta_ms: 10.0,
            })
            .collect()
    }

    #[test]
    fn table1_node1_ingestion() {
        let n = NodeParams::from_ms(20.0015, 10.5368).unwrap();
        assert_eq!(n.rate_alpha, 20.0015);
        assert!((n.shift_beta - 0.0105368).abs() < 1e-12);
        // round trip back to ms is lossless at 1e-12
        assert!((n.shift_beta * 1000.0 - 10.5368).abs() < 1e-12);
    }

    #[test]
    fn rejects_placement_size_mismatch() {
        let raw = RawConfig {
            epsilon: 1e-6,
            nodes: nodes(8),
            file_groups: vec![group(1, 1.0, 7, 4, (0..6).collect())],
        };
        let err = validate_system(&raw).unwrap_err();
        assert!(err.to_string().contains("placement size mismatch"), "{err}");
    }

    #[test]
    fn rejects_bad_codes_rates_and_duplicates() {
        let bad = [
            group(1, 1.0, 3, 4, vec![0, 1, 2]),
            group(1, 0.0, 3, 2, vec![0, 1, 2]),
            group(1, 1.0, 3, 2, vec![0, 1, 1]),
            group(1, 1.0, 3, 2, vec![0, 1, 9]),
        ];
        for g in bad {
            let raw = RawConfig {
                epsilon: 1e-6,
                nodes: nodes(4),
                file_groups: vec![g.clone()],
            };
            assert!(validate_system(&raw).is_err(), "{g:?} accepted");
        }
        assert!(NodeParams::new(0.0, 0.0).is_err());
        assert!(NodeParams::new(1.0, -0.1).is_err());
    }

    #[test]
    fn weights_follow_arrival_rates() {
        let raw = RawConfig {
            epsilon: 1e-6,
            nodes: nodes(12),
            file_groups: vec![
                group(1, 2.0 / 150.0, 7, 4, (0..7).collect()),
                group(1, 4.0 / 150.0, 7, 4, (1..8).collect()),
                group(1, 6.0 / 150.0, 7, 4, (3..10).collect()),
                group(1, 3.0 / 150.0, 7, 4, (5..12).collect()),
            ],
        };
        let model = validate_system(&raw).unwrap();
        let expect = [2.0, 4.0, 6.0, 3.0].map(|x| x / 15.0);
        for (f, w) in model.files.iter().zip(expect) {
            assert!((f.weight - w).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_override_is_normalized() {
        let mut a = group(2, 1.0, 2, 1, vec![0, 1]);
        let mut b = group(1, 3.0, 2, 1, vec![1, 2]);
        a.weight = Some(1.0);
        b.weight = Some(2.0);
        let raw = RawConfig {
            epsilon: 1e-6,
            nodes: nodes(3),
            file_groups: vec![a.clone(), b],
        };
        let model = validate_system(&raw).unwrap();
        let w: Vec<f64> = model.files.iter().map(|f| f.weight).collect();
        assert_eq!(w, vec![0.25, 0.25, 0.5]);

        let raw = RawConfig {
            epsilon: 1e-6,
            nodes: nodes(3),
            file_groups: vec![a, group(1, 3.0, 2, 1, vec![1, 2])],
        };
        assert!(validate_system(&raw).is_err());
    }

    #[test]
    fn aggregate_arrival_examples() {
        let files = vec![FileClass {
            code_n: 4,
            code_k: 2,
            arrival_rate: 1.0,
            weight: 1.0,
            placement: vec![0, 1, 2, 3],
        }];
        let zero = AccessMatrix::zeros(1, 4);
        assert_eq!(aggregate_arrival(&zero, &files), vec![0.0; 4]);
        let pi = AccessMatrix::from_rows(&[vec![0.5, 0.5, 1.0, 0.0]]);
        assert_eq!(aggregate_arrival(&pi, &files), vec![0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn traffic_intensity_examples() {
        let node = NodeParams::new(20.0, 0.01).unwrap();
        assert_eq!(traffic_intensity(0.0, &node), 0.0);
        assert!((traffic_intensity(5.0, &node) - 0.3).abs() < 1e-15);
        let boundary = node.rate_alpha / (1.0 + node.rate_alpha * node.shift_beta);
        assert!((traffic_intensity(boundary, &node) - 1.0).abs() < 1e-12);
        assert!(is_unstable(traffic_intensity(boundary * 1.0001, &node)));
    }

    #[test]
    fn scenario_toml_round_trip() {
        let text = r#"
            epsilon = 1e-6
            [[nodes]]
            alpha_per_sec = 20.0
            beta_ms = 10.0
            [[nodes]]
            alpha_per_sec = 30.0
            beta_ms = 5.0
            [[file_groups]]
            count = 3
            lambda_per_sec = 0.5
            n = 2
            k = 1
            placement = [1, 0]
        "#;
        let raw = RawConfig::from_toml_str(text).unwrap();
        let back = RawConfig::from_toml_str(&raw.to_toml_string()).unwrap();
        assert_eq!(raw, back);
        let model = validate_system(&raw).unwrap();
        assert_eq!(model.num_files(), 3);
        assert_eq!(model.files[0].placement, vec![0, 1]);
        assert!((model.nodes[1].shift_beta - 0.005).abs() < 1e-15);
    }
}
