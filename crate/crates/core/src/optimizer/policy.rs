//! The optimized policy and its baselines. Each baseline fixes some of
//! `{pi, t, placement}` and optimizes the rest with the same machinery.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::alternating::{alternate, AltOptions, Solution, StepMask};
use crate::error::{Error, Result};
use crate::model::{AccessMatrix, AuxVector, SystemModel};
use crate::projection::{feasible_start, INIT_T};

/// Offset mixed into the seed for random placements so they do not share a
/// stream with the file-order permutation.
const PLACEMENT_STREAM: u64 = 0x05ee_d0f9_1ace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Wltp,
    WltpRp,
    WltpRpFixedT,
    Peap,
    PeapRp,
    Pspp,
    PsppRp,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Wltp,
        PolicyKind::WltpRp,
        PolicyKind::WltpRpFixedT,
        PolicyKind::Peap,
        PolicyKind::PeapRp,
        PolicyKind::Pspp,
        PolicyKind::PsppRp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Wltp => "WLTP",
            PolicyKind::WltpRp => "WLTP-RP",
            PolicyKind::WltpRpFixedT => "WLTP-RP-FixedT",
            PolicyKind::Peap => "PEAP",
            PolicyKind::PeapRp => "PEAP-RP",
            PolicyKind::Pspp => "PSPP",
            PolicyKind::PsppRp => "PSPP-RP",
        }
    }

    /// True for the variants that draw a uniformly random placement.
    pub fn random_placement(self) -> bool {
        matches!(
            self,
            PolicyKind::WltpRp | PolicyKind::WltpRpFixedT | PolicyKind::PeapRp | PolicyKind::PsppRp
        )
    }

    /// Blocks of variables the policy optimizes.
    pub fn mask(self) -> StepMask {
        let placement = !self.random_placement();
        match self {
            PolicyKind::Wltp | PolicyKind::WltpRp => StepMask {
                t: true,
                pi: true,
                placement,
            },
            PolicyKind::WltpRpFixedT => StepMask {
                t: false,
                pi: true,
                placement,
            },
            PolicyKind::Peap | PolicyKind::PeapRp | PolicyKind::Pspp | PolicyKind::PsppRp => {
                StepMask {
                    t: true,
                    pi: false,
                    placement,
                }
            }
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_uppercase() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy '{s}'")))
    }
}

/// Uniformly random placements. Each run of identical consecutive files (a
/// scenario file group) draws one `n`-subset of the nodes that all of its
/// files share, replacing the group's configured node set. Runs use
/// separate streams, so changing the number of files in a group does not
/// change any group's placement.
pub fn random_placements(model: &SystemModel, seed: u64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(model.num_files());
    let mut run = 0u64;
    for (i, f) in model.files.iter().enumerate() {
        if i > 0 && *f == model.files[i - 1] {
            let prev = out[i - 1].clone();
            out.push(prev);
            continue;
        }
        if i > 0 {
            run += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PLACEMENT_STREAM);
        rng.set_stream(run);
        let mut p = sample(&mut rng, model.num_nodes(), f.code_n).into_vec();
        p.sort_unstable();
        out.push(p);
    }
    out
}

/// `pi_ij = k_i mu_j / sum_{l in S_i} mu_l` with `mu_j = 1 / E[X_j]`.
/// Entries above one are left for the projection to repair.
pub fn service_proportional(model: &SystemModel) -> AccessMatrix {
    let mut pi = AccessMatrix::zeros(model.num_files(), model.num_nodes());
    for (i, f) in model.files.iter().enumerate() {
        let total: f64 = f
            .placement
            .iter()
            .map(|&j| model.nodes[j].mean_rate())
            .sum();
        for &j in &f.placement {
            pi.set(i, j, f.code_k as f64 * model.nodes[j].mean_rate() / total);
        }
    }
    pi
}

/// Builds the policy's starting point and runs the alternating loop on the
/// blocks it is allowed to change.
pub fn baseline_policy(
    kind: PolicyKind,
    model: &SystemModel,
    x: f64,
    opts: &AltOptions,
) -> Result<Solution> {
    model.validate()?;
    let model = if kind.random_placement() {
        model.with_placements(&random_placements(
            model,
            opts.placement_seed.unwrap_or(opts.seed),
        ))
    } else {
        model.clone()
    };
    let start = match kind {
        PolicyKind::Pspp | PolicyKind::PsppRp => service_proportional(&model),
        _ => AccessMatrix::equal_access(&model),
    };
    let (pi, t) = feasible_start(&start, &model)?;
    let t = if kind == PolicyKind::WltpRpFixedT {
        // the fixed exponent is only lowered when the start needed it
        AuxVector(t.0.iter().map(|&tj| tj.min(INIT_T)).collect())
    } else {
        t
    };
    log::debug!("{kind}: starting alternating loop");
    alternate(&model, pi, t, x, kind.mask(), opts)
}
