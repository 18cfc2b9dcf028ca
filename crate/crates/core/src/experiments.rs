//! Built-in storage scenario, policy comparison sweeps and CSV output.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::bounds::file_tail_bound;
use crate::error::{Error, Result};
use crate::model::{validate_system, RawConfig, RawFileGroup, RawNode, SystemModel};
use crate::optimizer::{run_policy, AltOptions, PolicyKind, Solution};
use crate::sim::{empirical_tail, run_simulation, SimConfig, SimResult};

/// Service rates (1/s) of the twelve heterogeneous nodes.
pub const TABLE1_ALPHA: [f64; 12] = [
    20.0015, 26.1252, 14.9850, 17.0526, 27.1422, 22.8919, 30.0000, 21.3812, 11.9106, 25.1599,
    28.8188, 23.8067,
];

/// Service shifts (ms) of the twelve nodes.
pub const TABLE1_BETA_MS: [f64; 12] = [
    10.5368, 15.6018, 8.2756, 10.0120, 12.8544, 13.6722, 12.6616, 9.9156, 10.7872, 8.6166, 13.8721,
    10.8964,
];

/// Per-file arrival rates of the four groups, 1/s.
pub const TABLE1_GROUP_RATES: [f64; 4] = [2.0 / 150.0, 4.0 / 150.0, 6.0 / 150.0, 3.0 / 150.0];

/// First node (0-based) of each group's seven consecutive nodes.
pub const TABLE1_GROUP_FIRST_NODE: [usize; 4] = [0, 1, 3, 5];

/// Files per group in the full-size scenario.
pub const TABLE1_FULL_FILES_PER_GROUP: usize = 250;

/// Desk-scale default.
pub const DEFAULT_FILES_PER_GROUP: usize = 5;

/// The twelve-node, four-group scenario with a (7,4) code, as a raw config.
pub fn builtin_table1_raw(files_per_group: usize) -> RawConfig {
    RawConfig {
        epsilon: crate::model::DEFAULT_EPSILON,
        nodes: TABLE1_ALPHA
            .iter()
            .zip(TABLE1_BETA_MS)
            .map(|(&alpha_per_sec, beta_ms)| RawNode {
                alpha_per_sec,
                beta_ms,
            })
            .collect(),
        file_groups: TABLE1_GROUP_RATES
            .iter()
            .zip(TABLE1_GROUP_FIRST_NODE)
            .map(|(&lambda_per_sec, first)| RawFileGroup {
                count: files_per_group,
                lambda_per_sec,
                n: 7,
                k: 4,
                placement: (first..first + 7).collect(),
                weight: None,
            })
            .collect(),
    }
}

pub fn builtin_table1_scenario(files_per_group: usize) -> Result<SystemModel> {
    validate_system(&builtin_table1_raw(files_per_group))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    /// The built-in twelve-node scenario; the file count comes from
    /// `ExperimentSpec::files_per_group`.
    Table1,
    Custom(RawConfig),
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub scenario: ScenarioSource,
    pub policies: Vec<PolicyKind>,
    /// Latency thresholds, seconds; strictly increasing.
    pub x_grid: Vec<f64>,
    pub rate_mults: Vec<f64>,
    /// Only used with [`ScenarioSource::Table1`].
    pub files_per_group: Vec<usize>,
    pub opts: AltOptions,
    /// Overrides the scenario's stability relaxation.
    pub epsilon: Option<f64>,
    pub simulation: Option<SimConfig>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("no policies selected".into()));
        }
        if self.x_grid.is_empty() || self.x_grid.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidConfig(
                "x grid must be nonempty and positive".into(),
            ));
        }
        if self.x_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "x grid must be strictly increasing".into(),
            ));
        }
        if self.rate_mults.is_empty()
            || self.rate_mults.iter().any(|m| !(*m > 0.0 && m.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "rate multipliers must be nonempty and positive".into(),
            ));
        }
        match &self.scenario {
            ScenarioSource::Table1
                if self.files_per_group.is_empty() || self.files_per_group.contains(&0) =>
            {
                Err(Error::InvalidConfig(
                    "files per group must be nonempty and positive".into(),
                ))
            }
            ScenarioSource::Custom(_) if !self.files_per_group.is_empty() => {
                Err(Error::InvalidConfig(
                    "files per group only applies to the built-in scenario".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// One `(policy, sweep point)` result. List fields hold one value per file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub policy: PolicyKind,
    /// Zero for custom scenarios.
    pub files_per_group: usize,
    pub rate_mult: f64,
    pub x: f64,
    pub seed: u64,
    pub objective: f64,
    pub log_objective: f64,
    pub iterations: usize,
    pub passes: usize,
    pub converged: bool,
    pub per_file_bound: Vec<f64>,
    /// Empty unless simulation was enabled.
    pub empirical_tail: Vec<f64>,
    pub empirical_half_width: Vec<f64>,
}

/// CSV column order.
pub const CSV_HEADER: [&str; 13] = [
    "policy",
    "files_per_group",
    "rate_mult",
    "x_s",
    "seed",
    "objective",
    "log_objective",
    "iterations",
    "passes",
    "converged",
    "per_file_bound",
    "empirical_tail",
    "empirical_half_width",
];

/// Optimizes one policy at one threshold and optionally simulates the result.
pub fn evaluate_policy(
    kind: PolicyKind,
    model: &SystemModel,
    x: f64,
    opts: &AltOptions,
    simulation: Option<&SimConfig>,
) -> Result<(Solution, ResultRow, Option<SimResult>)> {
    let sol = run_policy(kind, model, x, opts)?;
    let placed = model.with_placements(&sol.placements);
    let per_file_bound = (0..placed.num_files())
        .map(|i| file_tail_bound(&placed, i, &sol.pi, &sol.t, x))
        .collect::<Result<Vec<_>>>()?;
    let sim = simulation
        .map(|cfg| run_simulation(&placed, &sol.pi, cfg))
        .transpose()?;
    let (empirical, half) = match &sim {
        Some(res) => {
            let est = empirical_tail(res, &[x])?;
            (
                est.iter().map(|e| e[0].p_hat).collect(),
                est.iter().map(|e| e[0].half_width).collect(),
            )
        }
        None => (Vec::new(), Vec::new()),
    };
    let row = ResultRow {
        policy: kind,
        files_per_group: 0,
        rate_mult: 1.0,
        x,
        seed: opts.seed,
        objective: sol.objective(),
        log_objective: sol.log_objective(),
        iterations: sol.iterations,
        passes: sol.passes,
        converged: sol.converged,
        per_file_bound,
        empirical_tail: empirical,
        empirical_half_width: half,
    };
    Ok((sol, row, sim))
}

struct Point {
    files_per_group: usize,
    rate_mult: f64,
    x: f64,
    index: u64,
}

/// Runs every policy at every `(files_per_group, rate_mult, x)` point.
/// Points run in parallel; point `p` orders its placement passes with seed
/// `opts.seed + p`, while random placements come from the base seed at every
/// point. Rows come back in sweep order regardless of scheduling.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let groups: Vec<usize> = match spec.scenario {
        ScenarioSource::Table1 => spec.files_per_group.clone(),
        ScenarioSource::Custom(_) => vec![0],
    };
    let mut points = Vec::new();
    for &fpg in &groups {
        for &mult in &spec.rate_mults {
            for &x in &spec.x_grid {
                points.push(Point {
                    files_per_group: fpg,
                    rate_mult: mult,
                    x,
                    index: points.len() as u64,
                });
            }
        }
    }
    let jobs: Vec<(&Point, PolicyKind)> = points
        .iter()
        .flat_map(|p| spec.policies.iter().map(move |&k| (p, k)))
        .collect();

    jobs.par_iter()
        .map(|&(p, kind)| {
            let context = format!(
                "policy {kind}, files_per_group {}, rate_mult {}, x {}",
                p.files_per_group, p.rate_mult, p.x
            );
            let run = || -> Result<ResultRow> {
                let base = match &spec.scenario {
                    ScenarioSource::Table1 => builtin_table1_scenario(p.files_per_group)?,
                    ScenarioSource::Custom(raw) => validate_system(raw)?,
                };
                let mut model = base.scaled_rates(p.rate_mult);
                if let Some(eps) = spec.epsilon {
                    model.epsilon = eps;
                    model.validate()?;
                }
                // random placements are shared by every point so sweeps compare like with like
                let opts = AltOptions {
                    seed: spec.opts.seed.wrapping_add(p.index),
                    placement_seed: Some(spec.opts.placement_seed.unwrap_or(spec.opts.seed)),
                    ..spec.opts
                };
                let sim = spec.simulation.map(|s| SimConfig {
                    seed: s.seed.wrapping_add(p.index),
                    ..s
                });
                let (_, mut row, _) = evaluate_policy(kind, &model, p.x, &opts, sim.as_ref())?;
                row.files_per_group = p.files_per_group;
                row.rate_mult = p.rate_mult;
                Ok(row)
            };
            run().map_err(|e| Error::AtPoint {
                context,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Shortest round-trip formatting; scientific outside `[1e-4, 1e15)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e15).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| fmt_f64(v))
        .collect::<Vec<_>>()
        .join(";")
}

fn split(field: &str) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(parse_num).collect()
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Csv(format!("cannot parse '{v}'")))
}

/// Writes rows as CSV with [`CSV_HEADER`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.name().to_string(),
            r.files_per_group.to_string(),
            fmt_f64(r.rate_mult),
            fmt_f64(r.x),
            r.seed.to_string(),
            fmt_f64(r.objective),
            fmt_f64(r.log_objective),
            r.iterations.to_string(),
            r.passes.to_string(),
            r.converged.to_string(),
            join(&r.per_file_bound),
            join(&r.empirical_tail),
            join(&r.empirical_half_width),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Csv(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(ResultRow {
            policy: rec[0].parse()?,
            files_per_group: parse_num(&rec[1])?,
            rate_mult: parse_num(&rec[2])?,
            x: parse_num(&rec[3])?,
            seed: parse_num(&rec[4])?,
            objective: parse_num(&rec[5])?,
            log_objective: parse_num(&rec[6])?,
            iterations: parse_num(&rec[7])?,
            passes: parse_num(&rec[8])?,
            converged: parse_num(&rec[9])?,
            per_file_bound: split(&rec[10])?,
            empirical_tail: split(&rec[11])?,
            empirical_half_width: split(&rec[12])?,
        });
    }
    Ok(rows)
}
