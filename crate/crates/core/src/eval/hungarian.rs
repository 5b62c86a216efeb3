//! Minimum-cost assignment (Kuhn-Munkres with row/column potentials).

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; `None` when the row is matched to a padding column.
    pub row_to_col: Vec<Option<usize>>,
    pub cost: f64,
}

/// Solves the rectangular assignment problem. The smaller side is fully
/// matched, which is the same as padding to a square with zero-cost dummies.
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    if n > m {
        let t = cost.t().to_owned();
        let col_to_row = solve(&t);
        let mut row_to_col = vec![None; n];
        for (c, r) in col_to_row.iter().enumerate() {
            row_to_col[*r] = Some(c);
        }
        return Ok(finish(cost, row_to_col));
    }
    let row_to_col = solve(cost).into_iter().map(Some).collect();
    Ok(finish(cost, row_to_col))
}

fn finish(cost: &Array2<f64>, row_to_col: Vec<Option<usize>>) -> Assignment {
    let total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[[r, c]]))
        .sum();
    Assignment {
        row_to_col,
        cost: total,
    }
}

/// `n <= m`; returns the column of every row.
fn solve(a: &Array2<f64>) -> Vec<usize> {
    let (n, m) = a.dim();
    // 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[[i0 - 1, j - 1]] - u[i0] - v[j];
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}
