//! Rectangular minimum-cost assignment.
//!
//! The core is the shortest-augmenting-path Hungarian method with row and
//! column potentials, `O(n^2 m)` for `n <= m`. Among several optimal
//! assignments the lexicographically smallest list of `(row, column)` pairs
//! wins; finding it re-solves sub-problems for each earlier candidate pair,
//! which is cheap at the sizes used here (a few dozen rows at most).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row; `min(n, m)` of them.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned costs, accumulated in row order.
    pub total: f64,
}

impl Assignment {
    /// `column_of[row]` for every row, `None` where the row is unassigned.
    pub fn column_of(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Minimum-cost injective assignment on a row-major `rows x cols` matrix.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::Contract(format!(
            "cost matrix has {} entries, expected {rows}x{cols}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("cost matrix entry {bad} is not finite")));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment { pairs: Vec::new(), total: 0.0 });
    }
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let first = solve_sub(cost, cols, &all_rows, &all_cols);
    let best = pair_total(cost, cols, &first);
    let size = rows.min(cols);
    let scale = cost.iter().fold(1.0f64, |a, v| a.max(v.abs())) * size as f64;
    let tol = 1e-12 * scale;

    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(size);
    let mut fixed_cost = 0.0;
    let mut known = first;
    while fixed.len() < size {
        let (kr, kc) = known[fixed.len()];
        let start = fixed.last().map_or(0, |&(r, _)| r + 1);
        let mut chosen = None;
        'search: for r in start..=kr {
            for c in 0..cols {
                if (r, c) >= (kr, kc) {
                    break 'search;
                }
                if fixed.iter().any(|&(_, fc)| fc == c) {
                    continue;
                }
                let sub_rows: Vec<usize> = (r + 1..rows).collect();
                let sub_cols: Vec<usize> = (0..cols).filter(|&j| j != c && fixed.iter().all(|&(_, fc)| fc != j)).collect();
                let need = size - fixed.len() - 1;
                if sub_rows.len().min(sub_cols.len()) != need {
                    continue;
                }
                let rest = solve_sub(cost, cols, &sub_rows, &sub_cols);
                let candidate = fixed_cost + cost[r * cols + c] + pair_total(cost, cols, &rest);
                if candidate <= best + tol {
                    chosen = Some(((r, c), rest));
                    break 'search;
                }
            }
        }
        let next = match chosen {
            Some((pair, rest)) => {
                known.truncate(fixed.len());
                known.push(pair);
                known.extend(rest);
                pair
            }
            None => (kr, kc),
        };
        fixed_cost += cost[next.0 * cols + next.1];
        fixed.push(next);
    }
    let total = pair_total(cost, cols, &fixed);
    Ok(Assignment { pairs: fixed, total })
}

fn pair_total(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}

/// Optimal assignment restricted to the given rows and columns, as original
/// `(row, column)` pairs sorted by row.
fn solve_sub(cost: &[f64], cols: usize, row_ids: &[usize], col_ids: &[usize]) -> Vec<(usize, usize)> {
    if row_ids.is_empty() || col_ids.is_empty() {
        return Vec::new();
    }
    let at = |i: usize, j: usize| cost[row_ids[i] * cols + col_ids[j]];
    let mut pairs = if row_ids.len() <= col_ids.len() {
        augment(row_ids.len(), col_ids.len(), at)
            .into_iter()
            .map(|(i, j)| (row_ids[i], col_ids[j]))
            .collect::<Vec<_>>()
    } else {
        augment(col_ids.len(), row_ids.len(), |j, i| at(i, j))
            .into_iter()
            .map(|(j, i)| (row_ids[i], col_ids[j]))
            .collect::<Vec<_>>()
    };
    pairs.sort_unstable();
    pairs
}

/// Shortest augmenting paths for `n <= m`; returns `(row, col)` for all rows.
fn augment(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row matched to 1-based column j; 0 means free.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}
