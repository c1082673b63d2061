//! Pair-wise matching costs and assignment solvers.
//!
//! Rows are ground-truth objects (or teacher predictions), columns are
//! queries. Three solvers share the [`MatchAssignment`] output: the
//! shortest-augmenting-path Hungarian method, an exhaustive enumerator used
//! as a test oracle, and the identity mapping used for index-aligned
//! distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, DetectorOutput, MatchAssignment};

/// Weights of the class, L1 and GIoU terms of the matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Dense row-major `rows x cols` matrix with `rows <= cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", values.len()),
            });
        }
        if rows > cols {
            return Err(Error::Dimension { rows, cols });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape {
                expected: format!("{c} columns"),
                got: "ragged rows".into(),
            });
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Entry `(i, j) = w_cls·(−p_j(c_i)) + w_l1·‖b_i − b_j‖₁ + w_giou·(1 − GIoU(b_i, b_j))`.
pub fn build_cost_matrix(
    gts: &AnnotationSet,
    output: &DetectorOutput,
    weights: CostWeights,
) -> Result<CostMatrix> {
    let m = gts.len();
    let n = output.len();
    if m > n {
        return Err(Error::Dimension { rows: m, cols: n });
    }
    let c = output.num_categories();
    for a in gts.iter() {
        if a.category_id >= c {
            return Err(Error::InvalidCategory {
                category: a.category_id,
                num_categories: c,
            });
        }
    }
    let mut values = Vec::with_capacity(m * n);
    for gt in gts.iter() {
        for q in &output.queries {
            let class = -q.probabilities[gt.category_id];
            let l1 = gt.bbox.l1(&q.bbox);
            let giou = 1.0 - gt.bbox.giou(&q.bbox);
            values.push(weights.class * class + weights.l1 * l1 + weights.giou * giou);
        }
    }
    CostMatrix::new(m, n, values)
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// Shortest augmenting path with row/column potentials, `O(rows² · cols)`.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Dimension { rows: n, cols: m });
    }
    if n == 0 {
        return MatchAssignment::new(Vec::new(), 0, m);
    }
    // 1-based arrays; column 0 is the virtual source.
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
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    MatchAssignment::new(pairs, n, m)
}

pub const BRUTE_FORCE_MAX_ROWS: usize = 8;

/// Exhaustive search over all injections. Ties go to the lexicographically
/// smallest tuple of query indices.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::TooLarge {
            rows: n,
            max: BRUTE_FORCE_MAX_ROWS,
        });
    }
    if n > m {
        return Err(Error::Dimension { rows: n, cols: m });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; m];
    enumerate(cost, &mut current, &mut used, &mut best);
    let cols = best.map(|(_, c)| c).unwrap_or_default();
    MatchAssignment::new(cols.into_iter().enumerate().collect(), n, m)
}

fn enumerate(
    cost: &CostMatrix,
    current: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let row = current.len();
    if row == cost.rows {
        let total: f64 = current.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        // Strict improvement keeps the first (lexicographically smallest) optimum.
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            *best = Some((total, current.clone()));
        }
        return;
    }
    for j in 0..cost.cols {
        if used[j] {
            continue;
        }
        used[j] = true;
        current.push(j);
        enumerate(cost, current, used, best);
        current.pop();
        used[j] = false;
    }
}

/// `σ_i = i` for `i < count`.
pub fn identity_assign(count: usize) -> MatchAssignment {
    MatchAssignment::new((0..count).map(|i| (i, i)).collect(), count, count)
        .expect("identity pairs are injective")
}

/// Sum of matched entries in gt-index order.
pub fn assignment_cost(cost: &CostMatrix, assignment: &MatchAssignment) -> f64 {
    assignment
        .sorted()
        .iter()
        .map(|&(i, j)| cost.get(i, j))
        .sum()
}
