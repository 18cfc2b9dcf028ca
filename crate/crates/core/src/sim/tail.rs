use super::engine::SimResult;
use crate::error::{Error, Result};

/// Two-sided 99% standard normal quantile.
pub const Z_99: f64 = 2.575_829_303_548_901;

pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub x: f64,
    /// Fraction of samples with latency `>= x`.
    pub p_hat: f64,
    /// Normal-approximation half-width at the 99% level.
    pub half_width: f64,
    pub samples: usize,
}

/// Estimates `Pr(L >= x)` from raw samples.
pub fn tail_of_samples(samples: &[f64], x: f64) -> TailEstimate {
    let n = samples.len();
    let hits = samples.iter().filter(|&&l| l >= x).count();
    let p = hits as f64 / n as f64;
    TailEstimate {
        x,
        p_hat: p,
        half_width: Z_99 * (p * (1.0 - p) / n as f64).sqrt(),
        samples: n,
    }
}

/// Per-file tail estimates, indexed `[file][x]`.
pub fn empirical_tail(result: &SimResult, x_grid: &[f64]) -> Result<Vec<Vec<TailEstimate>>> {
    result
        .latencies
        .iter()
        .enumerate()
        .map(|(i, samples)| {
            if samples.len() < MIN_SAMPLES {
                return Err(Error::InsufficientSamples {
                    file: i,
                    have: samples.len(),
                    need: MIN_SAMPLES,
                });
            }
            Ok(x_grid
                .iter()
                .map(|&x| tail_of_samples(samples, x))
                .collect())
        })
        .collect()
}
