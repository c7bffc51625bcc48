//! Rectangular linear assignment (Kuhn–Munkres with potentials).

use ndarray::Array2;

/// Minimum-cost assignment on a dense rectangular matrix.
///
/// Every row is matched when `rows <= cols`, every column otherwise. Returns,
/// for each row, the assigned column. All entries must be finite.
pub fn min_cost_assignment(costs: &Array2<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = costs.dim();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        solve(rows, cols, |i, j| costs[(i, j)])
    } else {
        let by_col = solve(cols, rows, |i, j| costs[(j, i)]);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        out
    }
}

/// O(n²m) shortest augmenting path solver for `n <= m`.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal() {
        let c = array![[0.1, 0.9], [0.9, 0.1]];
        assert_eq!(min_cost_assignment(&c), vec![Some(0), Some(1)]);
    }

    #[test]
    fn anti_diagonal() {
        let c = array![[0.9, 0.1, 0.5], [0.1, 0.9, 0.5]];
        assert_eq!(min_cost_assignment(&c), vec![Some(1), Some(0)]);
    }

    #[test]
    fn tall_matrix() {
        let c = array![[0.5], [0.1], [0.7]];
        assert_eq!(min_cost_assignment(&c), vec![None, Some(0), None]);
    }

    #[test]
    fn empty() {
        let c = Array2::<f64>::zeros((3, 0));
        assert_eq!(min_cost_assignment(&c), vec![None; 3]);
    }
}
