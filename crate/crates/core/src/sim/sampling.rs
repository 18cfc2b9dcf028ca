use rand::Rng;

use crate::error::{Error, Result};

/// Row sums may drift by this much before sampling refuses the row.
pub const SAMPLING_ROW_TOL: f64 = 1e-6;

/// Draws exactly `k` distinct indices with inclusion probabilities given by
/// `pi_row` (Madow systematic sampling). One uniform is drawn per call.
pub fn sample_access_set<R: Rng + ?Sized>(
    pi_row: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let sum: f64 = pi_row.iter().sum();
    if (sum - k as f64).abs() > SAMPLING_ROW_TOL
        || pi_row
            .iter()
            .any(|&p| !(0.0..=1.0 + SAMPLING_ROW_TOL).contains(&p))
    {
        return Err(Error::RowSum {
            row: 0,
            sum,
            expected: k as f64,
        });
    }
    let scale = k as f64 / sum;
    let u: f64 = rng.random();
    let mut out = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut q = 0usize;
    let last = pi_row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    for (j, &p) in pi_row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p * scale;
        // rounding could leave the final point past the last boundary
        let upper = if j == last { f64::INFINITY } else { cum };
        if q < k && u + (q as f64) < upper {
            out.push(j);
            q += 1;
        }
    }
    debug_assert_eq!(out.len(), k);
    Ok(out)
}
