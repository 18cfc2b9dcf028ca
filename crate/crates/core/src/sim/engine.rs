//! Event-driven fork-join simulation. Requests arrive as a merged Poisson
//! stream; each forks `k_i` chunk requests onto distinct nodes, every node
//! serves its FCFS queue, and the request finishes with its slowest chunk.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use super::sampling::sample_access_set;
use crate::error::{Error, Result};
use crate::model::{aggregate_arrival, is_unstable, traffic_intensity, AccessMatrix, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// File requests generated per replication, warmup included.
    pub requests: usize,
    /// Fraction of the earliest requests excluded from every statistic.
    pub warmup: f64,
    pub seed: u64,
    /// Independent replications (seeds `seed`, `seed + 1`, ...), pooled.
    pub replications: usize,
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            requests: 100_000,
            warmup: 0.1,
            seed: 0,
            replications: 1,
            record_trace: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.warmup) {
            return Err(Error::InvalidConfig(format!(
                "warmup must be in [0, 0.5), got {}",
                self.warmup
            )));
        }
        if self.requests < 1000 {
            return Err(Error::InvalidConfig(format!(
                "at least 1000 requests are required, got {}",
                self.requests
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be positive".into()));
        }
        Ok(())
    }
}

/// One completed, measured file request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub file_id: usize,
    pub arrival_time_s: f64,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Measured file latencies, seconds, per file.
    pub latencies: Vec<Vec<f64>>,
    /// Measured chunk sojourn times, seconds, per node.
    pub node_sojourns: Vec<Vec<f64>>,
    /// Busy fraction per node over the measurement window.
    pub utilization: Vec<f64>,
    /// Time-averaged number of chunk requests at each node (queued or in service).
    pub mean_in_node: Vec<f64>,
    /// Mean waiting time before service per node.
    pub mean_queue_delay: Vec<f64>,
    /// Nodes whose offered load has `rho >= 1`.
    pub unstable_nodes: Vec<usize>,
    pub trace: Vec<TraceRecord>,
}

impl SimResult {
    pub fn mean_sojourn(&self, node: usize) -> f64 {
        let s = &self.node_sojourns[node];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Writes the trace as `file_id,arrival_time_s,latency_s` lines.
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["file_id", "arrival_time_s", "latency_s"])?;
        for r in &self.trace {
            w.write_record([
                r.file_id.to_string(),
                r.arrival_time_s.to_string(),
                r.latency_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Completion { node: usize },
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    seq: u64,
}

impl Event {
    /// Completions sort before arrivals at equal times, then by node.
    fn key(&self) -> (u8, usize) {
        match self.kind {
            EventKind::Completion { node } => (0, node),
            EventKind::Arrival => (1, 0),
        }
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so that BinaryHeap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.key().cmp(&self.key()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Chunk {
    request: usize,
    arrived: f64,
}

struct Request {
    file: usize,
    arrived: f64,
    outstanding: usize,
    measured: bool,
}

struct NodeState {
    queue: VecDeque<Chunk>,
    in_service: Option<(Chunk, f64)>,
    /// Integral of the number in node over the measurement window.
    area: f64,
    busy: f64,
    last_change: f64,
    wait_sum: f64,
    wait_count: usize,
}

impl NodeState {
    fn count(&self) -> usize {
        self.queue.len() + usize::from(self.in_service.is_some())
    }

    fn advance(&mut self, now: f64, window: (f64, f64)) {
        let lo = self.last_change.max(window.0);
        let hi = now.min(window.1);
        if hi > lo {
            let n = self.count();
            self.area += n as f64 * (hi - lo);
            if n > 0 {
                self.busy += hi - lo;
            }
        }
        self.last_change = now;
    }
}

/// Runs one replication.
fn replicate(
    model: &SystemModel,
    pi: &AccessMatrix,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimResult> {
    let m = model.num_nodes();
    let r = model.num_files();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_rate = model.total_arrival_rate();
    let inter = Exp::new(total_rate).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let services: Vec<Exp<f64>> = model
        .nodes
        .iter()
        .map(|n| Exp::new(n.rate_alpha).map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;
    let cumulative: Vec<f64> = model
        .files
        .iter()
        .scan(0.0, |acc, f| {
            *acc += f.arrival_rate / total_rate;
            Some(*acc)
        })
        .collect();

    let warm = (cfg.requests as f64 * cfg.warmup).floor() as usize;
    let mut nodes: Vec<NodeState> = (0..m)
        .map(|_| NodeState {
            queue: VecDeque::new(),
            in_service: None,
            area: 0.0,
            busy: 0.0,
            last_change: 0.0,
            wait_sum: 0.0,
            wait_count: 0,
        })
        .collect();
    let mut requests: Vec<Request> = Vec::with_capacity(cfg.requests);
    let mut latencies = vec![Vec::new(); r];
    let mut node_sojourns = vec![Vec::new(); m];
    let mut trace = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    // measurement window in time; the upper end is the final arrival
    let mut window = (f64::INFINITY, f64::INFINITY);

    heap.push(Event {
        time: inter.sample(&mut rng),
        kind: EventKind::Arrival,
        seq,
    });
    seq += 1;

    let start_service = |node: &mut NodeState,
                         j: usize,
                         chunk: Chunk,
                         now: f64,
                         rng: &mut ChaCha8Rng,
                         measured: bool|
     -> f64 {
        if measured {
            node.wait_sum += now - chunk.arrived;
            node.wait_count += 1;
        }
        let done = now + model.nodes[j].shift_beta + services[j].sample(rng);
        node.in_service = Some((chunk, done));
        done
    };

    while let Some(ev) = heap.pop() {
        let now = ev.time;
        match ev.kind {
            EventKind::Arrival => {
                let id = requests.len();
                if id == warm {
                    window.0 = now;
                }
                if id + 1 == cfg.requests {
                    window.1 = now;
                }
                let u: f64 = rng.random();
                let file = cumulative.partition_point(|&c| c <= u).min(r - 1);
                let f = &model.files[file];
                let set =
                    sample_access_set(pi.row(file), f.code_k, &mut rng).map_err(|e| match e {
                        Error::RowSum { sum, expected, .. } => Error::RowSum {
                            row: file,
                            sum,
                            expected,
                        },
                        other => other,
                    })?;
                let measured = id >= warm;
                requests.push(Request {
                    file,
                    arrived: now,
                    outstanding: set.len(),
                    measured,
                });
                for j in set {
                    let node = &mut nodes[j];
                    node.advance(now, window);
                    let chunk = Chunk {
                        request: id,
                        arrived: now,
                    };
                    if node.in_service.is_none() {
                        let done = start_service(node, j, chunk, now, &mut rng, measured);
                        heap.push(Event {
                            time: done,
                            kind: EventKind::Completion { node: j },
                            seq,
                        });
                        seq += 1;
                    } else {
                        node.queue.push_back(chunk);
                    }
                }
                if requests.len() < cfg.requests {
                    heap.push(Event {
                        time: now + inter.sample(&mut rng),
                        kind: EventKind::Arrival,
                        seq,
                    });
                    seq += 1;
                }
            }
            EventKind::Completion { node: j } => {
                let node = &mut nodes[j];
                node.advance(now, window);
                let (chunk, _) = node.in_service.take().expect("completion without service");
                let req = &mut requests[chunk.request];
                if req.measured {
                    node_sojourns[j].push(now - chunk.arrived);
                }
                req.outstanding -= 1;
                if req.outstanding == 0 && req.measured {
                    let latency = now - req.arrived;
                    latencies[req.file].push(latency);
                    if cfg.record_trace {
                        trace.push(TraceRecord {
                            file_id: req.file,
                            arrival_time_s: req.arrived,
                            latency_s: latency,
                        });
                    }
                }
                if let Some(next) = node.queue.pop_front() {
                    let measured = requests[next.request].measured;
                    let done = start_service(node, j, next, now, &mut rng, measured);
                    heap.push(Event {
                        time: done,
                        kind: EventKind::Completion { node: j },
                        seq,
                    });
                    seq += 1;
                }
            }
        }
    }

    let span = (window.1 - window.0).max(f64::MIN_POSITIVE);
    Ok(SimResult {
        latencies,
        node_sojourns,
        utilization: nodes.iter().map(|n| n.busy / span).collect(),
        mean_in_node: nodes.iter().map(|n| n.area / span).collect(),
        mean_queue_delay: nodes
            .iter()
            .map(|n| {
                if n.wait_count > 0 {
                    n.wait_sum / n.wait_count as f64
                } else {
                    0.0
                }
            })
            .collect(),
        unstable_nodes: Vec::new(),
        trace,
    })
}

fn pool(parts: Vec<SimResult>) -> SimResult {
    let count = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one replication");
    for p in it {
        for (a, b) in acc.latencies.iter_mut().zip(p.latencies) {
            a.extend(b);
        }
        for (a, b) in acc.node_sojourns.iter_mut().zip(p.node_sojourns) {
            a.extend(b);
        }
        for (a, b) in acc.utilization.iter_mut().zip(p.utilization) {
            *a += b;
        }
        for (a, b) in acc.mean_in_node.iter_mut().zip(p.mean_in_node) {
            *a += b;
        }
        for (a, b) in acc.mean_queue_delay.iter_mut().zip(p.mean_queue_delay) {
            *a += b;
        }
        acc.trace.extend(p.trace);
    }
    for v in acc
        .utilization
        .iter_mut()
        .chain(acc.mean_in_node.iter_mut())
        .chain(acc.mean_queue_delay.iter_mut())
    {
        *v /= count;
    }
    acc
}

/// Simulates `model` under access matrix `pi`. Unstable nodes are reported
/// in the result and logged, but the run still completes.
pub fn run_simulation(
    model: &SystemModel,
    pi: &AccessMatrix,
    cfg: &SimConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    model.validate()?;
    pi.check(model)?;
    let loads = aggregate_arrival(pi, &model.files);
    let unstable: Vec<usize> = model
        .nodes
        .iter()
        .zip(&loads)
        .enumerate()
        .filter(|(_, (n, &l))| is_unstable(traffic_intensity(l, n)))
        .map(|(j, _)| j)
        .collect();
    if !unstable.is_empty() {
        log::warn!("simulating with unstable nodes {unstable:?}; queues will grow without bound");
    }
    let parts: Vec<SimResult> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| replicate(model, pi, cfg, cfg.seed.wrapping_add(rep as u64)))
        .collect::<Result<_>>()?;
    let mut out = pool(parts);
    out.unstable_nodes = unstable;
    Ok(out)
}
