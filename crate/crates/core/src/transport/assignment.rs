//! Exact minimum-cost perfect matching on a square cost matrix.
//!
//! Potential-based shortest-augmenting-path formulation, O(N³) worst case.
//! Exactness matters: the matching feeds both gradient estimators and
//! acceptance tolerances, so approximate or entropic solvers are out.

use nalgebra::DMatrix;

/// Solves the assignment problem for a square cost matrix.
///
/// Returns `(row_to_col, total_cost)` where `row_to_col[i]` is the column
/// matched to row `i` and the total is the exact sum of matched entries.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    assert!(n > 0, "assignment needs at least one row");

    // row-major copy: the augmenting scan walks whole rows
    let mut rows = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            rows[i * n + j] = cost[(i, j)];
        }
    }

    // 1-based arrays with column 0 acting as the virtual start column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row currently matched to column j
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv[1..].fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let ui0 = u[i0];
            let row = &rows[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
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
        // augment along the alternating path
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
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| rows[i * n + row_to_col[i]]).sum();
    (row_to_col, total)
}
