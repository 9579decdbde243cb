//! Minimum-cost assignment of ground-truth modals to proposals.

/// Solves the rectangular assignment problem for a `rows × cols` cost matrix
/// (`rows <= cols`). Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "hungarian needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    // Potentials formulation, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut assign = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Brute force over all injective assignments; for cross-checking.
pub fn exhaustive_assignment(cost: &[f64], rows: usize, cols: usize) -> (Vec<usize>, f64) {
    fn go(
        r: usize,
        rows: usize,
        cols: usize,
        cost: &[f64],
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: f64,
        best: &mut (Vec<usize>, f64),
    ) {
        if r == rows {
            if acc < best.1 {
                *best = (cur.clone(), acc);
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(r + 1, rows, cols, cost, used, cur, acc + cost[r * cols + c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    if rows == 0 {
        return (Vec::new(), 0.0);
    }
    go(0, rows, cols, cost, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}

pub fn assignment_cost(cost: &[f64], cols: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Pairs each target with a distinct proposal minimising the total absolute
/// disparity difference. Returns `(target index, proposal index)` pairs.
pub fn match_targets(targets: &[f32], proposals: &[f32]) -> Vec<(usize, usize)> {
    let (rows, cols) = (targets.len(), proposals.len());
    let cost: Vec<f64> = targets
        .iter()
        .flat_map(|&t| proposals.iter().map(move |&p| (t - p).abs() as f64))
        .collect();
    hungarian(&cost, rows, cols).into_iter().enumerate().collect()
}
