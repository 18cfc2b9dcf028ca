//! Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
//! row/column potentials and shortest augmenting paths, O(n^3)).

/// Result of an assignment: `assignment[u]` is the column matched to row `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Solves `min sum_u cost[u][assignment[u]]` over permutations.
///
/// Ties are broken toward the lowest column index, so the result is
/// deterministic for a given matrix.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    if n == 0 {
        return Assignment {
            assignment: Vec::new(),
            cost: 0.0,
        };
    }
    for row in cost {
        assert_eq!(row.len(), n, "cost matrix must be square");
        assert!(
            row.iter().all(|c| c.is_finite()),
            "cost matrix must be finite"
        );
    }

    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r][c])
        .sum();
    Assignment {
        assignment,
        cost: total,
    }
}
