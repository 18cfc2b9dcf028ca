use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ectail::experiments::{
    run_experiment, write_csv, ExperimentSpec, ScenarioSource, DEFAULT_FILES_PER_GROUP,
};
use ectail::model::RawConfig;
use ectail::optimizer::{AltOptions, PiOptOptions, PolicyKind};
use ectail::sim::SimConfig;

/// Tail-latency bounds and scheduling optimization for erasure-coded storage.
///
/// Results are written as CSV. Set RUST_LOG=debug for progress output.
#[derive(Parser, Debug)]
#[command(name = "ectail", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize each policy at every threshold and report its bounds.
    Optimize(CommonArgs),
    /// Optimize, then simulate the resulting schedule and report empirical tails.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Sweep arrival-rate multipliers and file counts.
    Sweep(CommonArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Builtin {
    Table1,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "builtin")]
    scenario: Option<PathBuf>,

    /// Built-in scenario; used when no --scenario is given.
    #[arg(long, value_enum)]
    builtin: Option<Builtin>,

    /// Policy to run; repeat for several (e.g. WLTP, PEAP, PSPP-RP).
    #[arg(long = "policy", default_value = "WLTP")]
    policies: Vec<PolicyKind>,

    /// Latency thresholds in seconds: comma list or start:step:end.
    #[arg(long, default_value = "20:10:70", value_parser = parse_grid)]
    x_grid: Grid,

    /// Arrival-rate multipliers: comma list or start:step:end.
    #[arg(long, default_value = "1", value_parser = parse_grid)]
    rate_mult: Grid,

    /// Files per group for the built-in scenario (comma list).
    #[arg(long, value_delimiter = ',')]
    files_per_group: Vec<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Relative objective decrease that ends the outer loop.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,

    /// Maximum outer iterations.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,

    /// Maximum inner iterations of the access-probability step.
    #[arg(long, default_value_t = 500)]
    inner_iter: usize,

    /// Stability relaxation; overrides the scenario's value.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// File requests per replication.
    #[arg(long, default_value_t = 100_000)]
    requests: usize,

    /// Fraction of requests discarded as warmup.
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,

    #[arg(long, default_value_t = 1)]
    replications: usize,

    /// Dump per-request latencies here (single policy and threshold only).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number '{v}'"))
    };
    match parts.as_slice() {
        [start, step, end] => {
            let (start, step, end) = (num(start)?, num(step)?, num(end)?);
            if !(step > 0.0) || end < start {
                return Err("range needs step > 0 and end >= start".into());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            Ok(Grid((0..=n).map(|i| start + i as f64 * step).collect()))
        }
        [_] => s.split(',').map(num).collect::<Result<_, _>>().map(Grid),
        _ => Err(format!("cannot parse grid '{s}'")),
    }
}

fn build_spec(args: &CommonArgs, simulation: Option<SimConfig>) -> Result<ExperimentSpec> {
    let scenario = match (&args.scenario, args.builtin) {
        (Some(path), _) => ScenarioSource::Custom(
            RawConfig::from_path(path)
                .with_context(|| format!("reading scenario {}", path.display()))?,
        ),
        (None, Some(Builtin::Table1)) | (None, None) => ScenarioSource::Table1,
    };
    let files_per_group = match scenario {
        ScenarioSource::Table1 if args.files_per_group.is_empty() => vec![DEFAULT_FILES_PER_GROUP],
        _ => args.files_per_group.clone(),
    };
    let mut policies = args.policies.clone();
    policies.dedup();
    Ok(ExperimentSpec {
        scenario,
        policies,
        x_grid: args.x_grid.0.clone(),
        rate_mults: args.rate_mult.0.clone(),
        files_per_group,
        opts: AltOptions {
            tol: args.tol,
            max_outer: args.max_iter,
            inner: PiOptOptions {
                max_iter: args.inner_iter,
                ..PiOptOptions::default()
            },
            seed: args.seed,
            placement_seed: None,
        },
        epsilon: args.epsilon,
        simulation,
    })
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let (common, sim_args) = match &cli.command {
        Command::Optimize(c) | Command::Sweep(c) => (c, None),
        Command::Simulate { common, sim } => (common, Some(sim)),
    };
    if let Command::Optimize(c) = &cli.command {
        if c.rate_mult.0.len() > 1 || c.files_per_group.len() > 1 {
            bail!("optimize takes a single rate multiplier and file count; use sweep");
        }
    }
    let simulation = sim_args.map(|s| SimConfig {
        requests: s.requests,
        warmup: s.warmup,
        seed: common.seed,
        replications: s.replications,
        record_trace: s.trace.is_some(),
    });
    let spec = build_spec(common, simulation)?;

    let started = Instant::now();
    let rows = match sim_args.and_then(|s| s.trace.as_ref()) {
        Some(trace_path) => simulate_with_trace(&spec, trace_path)?,
        None => run_experiment(&spec)?,
    };
    log::info!("{} rows in {:.2?}", rows.len(), started.elapsed());

    let mut out = output(&common.out)?;
    write_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn simulate_with_trace(
    spec: &ExperimentSpec,
    trace_path: &PathBuf,
) -> Result<Vec<ectail::experiments::ResultRow>> {
    use ectail::experiments::{builtin_table1_scenario, evaluate_policy};
    use ectail::model::validate_system;

    if spec.policies.len() != 1
        || spec.x_grid.len() != 1
        || spec.rate_mults.len() != 1
        || spec.files_per_group.len() > 1
    {
        bail!("--trace needs exactly one policy, threshold, rate multiplier and file count");
    }
    spec.validate()?;
    let base = match &spec.scenario {
        ScenarioSource::Table1 => builtin_table1_scenario(spec.files_per_group[0])?,
        ScenarioSource::Custom(raw) => validate_system(raw)?,
    };
    let mut model = base.scaled_rates(spec.rate_mults[0]);
    if let Some(eps) = spec.epsilon {
        model.epsilon = eps;
    }
    let (kind, x) = (spec.policies[0], spec.x_grid[0]);
    let sim = spec.simulation.expect("simulate sets a config");
    let (_, mut row, res) = evaluate_policy(kind, &model, x, &spec.opts, Some(&sim))?;
    row.files_per_group = spec.files_per_group.first().copied().unwrap_or(0);
    row.rate_mult = spec.rate_mults[0];
    let res = res.expect("simulation was requested");
    let file =
        File::create(trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    res.write_trace(BufWriter::new(file))?;
    Ok(vec![row])
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
