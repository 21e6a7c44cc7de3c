//! Exact optimal assignment (Kuhn-Munkres / Jonker-Volgenant style,
//! shortest augmenting paths with dual potentials, O(n^2 m)).

use ndarray::Array2;

/// Minimum-cost assignment of every row to a distinct column; requires
/// `nrows <= ncols`. Returns the assigned column per row and the total cost.
pub fn min_cost_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let (n, m) = cost.dim();
    assert!(n >= 1 && n <= m, "need 1 <= nrows <= ncols, got {n}x{m}");

    // 1-indexed duals and matching, column 0 is a sentinel
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // 0 = free
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    // total cost summed in row order so independent recomputations agree
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    (assignment, total)
}

/// Maximum-sum one-to-one assignment of rows to columns for an arbitrary
/// rectangular score matrix. Rows beyond the column count stay unassigned
/// (`None`). Unassigned pairs contribute zero.
pub fn max_sum_assignment(score: &Array2<f64>) -> (Vec<Option<usize>>, f64) {
    let (n, m) = score.dim();
    assert!(n >= 1 && m >= 1);
    let side = n.max(m);
    // pad to square; dummy cells carry score 0 (negated cost 0)
    let mut cost = Array2::zeros((side, side));
    for i in 0..n {
        for j in 0..m {
            cost[[i, j]] = -score[[i, j]];
        }
    }
    let (assign, _) = min_cost_assignment(&cost);
    let mut out = vec![None; n];
    let mut total = 0.0;
    for i in 0..n {
        let j = assign[i];
        if j < m {
            out[i] = Some(j);
            total += score[[i, j]];
        }
    }
    (out, total)
}
