//! Shortest-augmenting-path Hungarian method with row/column potentials.
//!
//! Runs in O(n² m) for an n×m cost matrix with n ≤ m. Rows are inserted one
//! at a time; columns are scanned in increasing index order and ties keep the
//! earlier column, so the result is a deterministic function of the input.

/// Minimum-cost assignment of every row to a distinct column.
///
/// `cost` must be rectangular with `rows ≤ cols`. Returns the column chosen
/// for each row.
pub(crate) fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);

    // 1-based internally; column 0 is the virtual source.
    let mut row_pot = vec![0.0f64; n + 1];
    let mut col_pot = vec![0.0f64; m + 1];
    let mut row_of_col = vec![0usize; m + 1];
    let mut prev_col = vec![0usize; m + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut next_col = 0usize;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost[r0 - 1][col - 1] - row_pot[r0] - col_pot[col];
                if reduced < min_slack[col] {
                    min_slack[col] = reduced;
                    prev_col[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    next_col = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    row_pot[row_of_col[col]] += delta;
                    col_pot[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = next_col;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let back = prev_col[col0];
            row_of_col[col0] = row_of_col[back];
            col0 = back;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for col in 1..=m {
        if row_of_col[col] != 0 {
            assignment[row_of_col[col] - 1] = col - 1;
        }
    }
    assignment
}
