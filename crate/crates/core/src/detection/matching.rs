use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `assignment[g]` is the query matched to ground truth `g`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost injective assignment of the `G` rows of `cost` to its `N`
/// columns (Kuhn-Munkres with potentials, O(G²N)).
pub fn hungarian_match(cost: &Tensor) -> Result<MatchResult> {
    if cost.shape().len() != 2 {
        return Err(Error::shape("hungarian_match", format!("cost must be 2-D, got {:?}", cost.shape())));
    }
    let (g, n) = (cost.rows(), cost.cols());
    if g > n {
        return Err(Error::InvalidArgument(format!("{g} ground truths exceed {n} queries")));
    }
    cost.ensure_finite("matching cost")?;
    if g == 0 {
        return Ok(MatchResult { assignment: vec![], total_cost: 0.0 });
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    // owner[j]: row (1-based) holding column j, 0 if free.
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=g {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
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
    let mut assignment = vec![0; g];
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment_cost(cost, &assignment);
    Ok(MatchResult { assignment, total_cost })
}

/// Sum of `cost[g][assignment[g]]` in row order.
pub fn assignment_cost(cost: &Tensor, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(g, &q)| cost.row(g)[q]).sum()
}
