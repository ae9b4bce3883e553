//! Bipartite target assignment: the Hungarian algorithm over an
//! association-cost matrix, a brute-force oracle for small instances, and
//! the two cost constructions (proposal matching and center matching).
//!
//! Rectangular problems are padded to square with `max_entry + 1`; queries
//! landing on padded columns are unmatched. Among equally cheap optima the
//! lexicographically smallest pair set wins.

use crate::linalg::Matrix;
use crate::losses::{bce_mask, ce_seg, dice_loss, AcWeights, GtTargets, PredictionSet};
use crate::{Error, Result};

/// k x G matrix of finite association costs (queries x ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Matrix,
}

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite {
                context: "cost matrix",
            });
        }
        Ok(CostMatrix { values })
    }

    pub fn num_queries(&self) -> usize {
        self.values.rows()
    }

    pub fn num_targets(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values.get(q, g)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.transpose(),
        }
    }
}

/// Partial injective mapping from query indices to ground-truth indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Matched pairs `(query, target)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl Assignment {
    pub fn new(mut pairs: Vec<(usize, usize)>, num_queries: usize) -> Self {
        pairs.sort_unstable();
        debug_assert!(pairs.windows(2).all(|w| w[0].0 != w[1].0), "duplicate query");
        debug_assert!(
            {
                let mut ts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                ts.sort_unstable();
                ts.windows(2).all(|w| w[0] != w[1])
            },
            "duplicate target"
        );
        Assignment { pairs, num_queries }
    }

    pub fn empty(num_queries: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            num_queries,
        }
    }

    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&query, |p| p.0)
            .ok()
            .map(|i| self.pairs[i].1)
    }

    pub fn unmatched_queries(&self) -> Vec<usize> {
        (0..self.num_queries)
            .filter(|&q| self.target_of(q).is_none())
            .collect()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.get(q, g)).sum()
    }
}

// Square assignment solver (shortest augmenting paths with potentials),
// O(n^3). Deterministic: equal path costs resolve to the lowest column.
fn solve_square(a: &Matrix) -> Vec<usize> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let none = usize::MAX;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    // p[j] = row matched to column j (column n is the virtual start).
    let mut p = vec![none; n + 1];
    let mut way = vec![0usize; n];

    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = none;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = a.get(i0, j) - u[i0] - v[j];
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
                    if p[j] != none {
                        u[p[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == none {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != n {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut row_to_col = vec![none; n];
    for j in 0..n {
        if p[j] != none {
            row_to_col[p[j]] = j;
        }
    }
    row_to_col
}

fn pad_square(cost: &CostMatrix) -> (Matrix, f64) {
    let (k, g) = (cost.num_queries(), cost.num_targets());
    let n = k.max(g);
    let pad = cost.values.max_abs() + 1.0;
    let a = Matrix::from_fn(n, n, |i, j| {
        if i < k && j < g {
            cost.get(i, j)
        } else {
            pad
        }
    });
    (a, pad)
}

fn padded_total(a: &Matrix, row_to_col: &[usize]) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| a.get(i, j))
        .sum()
}

fn real_pairs(cost: &CostMatrix, row_to_col: &[usize]) -> Vec<(usize, usize)> {
    let (k, g) = (cost.num_queries(), cost.num_targets());
    row_to_col
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < k && j < g)
        .map(|(i, &j)| (i, j))
        .collect()
}

fn has_duplicate_entries(cost: &CostMatrix) -> bool {
    let mut vals: Vec<f64> = cost.values.data().to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.windows(2).any(|w| w[0] == w[1])
}

// Minimal total of the padded problem with some rows/columns removed
// (already fixed by the refinement pass).
fn reduced_solve(a: &Matrix, skip_rows: &[bool], skip_cols: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..a.rows()).filter(|&i| !skip_rows[i]).collect();
    let cols: Vec<usize> = (0..a.cols()).filter(|&j| !skip_cols[j]).collect();
    debug_assert_eq!(rows.len(), cols.len());
    if rows.is_empty() {
        return 0.0;
    }
    let sub = Matrix::from_fn(rows.len(), cols.len(), |i, j| a.get(rows[i], cols[j]));
    let sol = solve_square(&sub);
    padded_total(&sub, &sol)
}

// Lexicographically smallest real pair set among optimal assignments.
fn lexicographic_refine(cost: &CostMatrix, a: &Matrix, opt_total: f64) -> Vec<(usize, usize)> {
    let (k, g) = (cost.num_queries(), cost.num_targets());
    let n = a.rows();
    let tol = 1e-9 * (1.0 + opt_total.abs());
    let mut skip_rows = vec![false; n];
    let mut skip_cols = vec![false; n];
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::new();
    // Virtual columns are interchangeable; track how many remain.
    let mut virtual_cols_left = n - g;

    for q in 0..k {
        skip_rows[q] = true;
        let mut chosen: Option<usize> = None;
        for cand in 0..g {
            if skip_cols[cand] {
                continue;
            }
            skip_cols[cand] = true;
            let rest = reduced_solve(a, &skip_rows, &skip_cols);
            let total = fixed_cost + a.get(q, cand) + rest;
            skip_cols[cand] = false;
            if (total - opt_total).abs() <= tol {
                chosen = Some(cand);
                break;
            }
        }
        match chosen {
            Some(c) => {
                skip_cols[c] = true;
                fixed_cost += a.get(q, c);
                pairs.push((q, c));
            }
            None => {
                // Query q stays unmatched: consume one virtual column.
                debug_assert!(virtual_cols_left > 0, "refinement found no option");
                let vc = (g..n).find(|&j| !skip_cols[j]).unwrap();
                skip_cols[vc] = true;
                virtual_cols_left -= 1;
                fixed_cost += a.get(q, vc);
            }
        }
    }
    pairs
}

/// Minimum-cost assignment of queries to ground-truth instances.
/// `G = 0` leaves every query unmatched.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (k, g) = (cost.num_queries(), cost.num_targets());
    if k == 0 || g == 0 {
        return Assignment::empty(k);
    }
    let (a, _pad) = pad_square(cost);
    let row_to_col = solve_square(&a);
    let pairs = if has_duplicate_entries(cost) {
        let total = padded_total(&a, &row_to_col);
        lexicographic_refine(cost, &a, total)
    } else {
        real_pairs(cost, &row_to_col)
    };
    Assignment::new(pairs, k)
}

/// Exhaustive minimum over injective assignments; the test oracle.
/// Guarded to `min(k, G) <= 8`.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (k, g) = (cost.num_queries(), cost.num_targets());
    if k.min(g) > 8 {
        return Err(Error::SampleTooLarge {
            requested: k.min(g),
            available: 8,
        });
    }
    if k == 0 || g == 0 {
        return Ok(Assignment::empty(k));
    }

    let want = k.min(g);
    let mut best_total = f64::INFINITY;
    let mut best_pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; g];
    let mut current: Vec<(usize, usize)> = Vec::new();

    fn rec(
        q: usize,
        matched: usize,
        total: f64,
        k: usize,
        g: usize,
        want: usize,
        cost: &CostMatrix,
        used: &mut [bool],
        current: &mut Vec<(usize, usize)>,
        best_total: &mut f64,
        best_pairs: &mut Vec<(usize, usize)>,
    ) {
        if q == k {
            debug_assert_eq!(matched, want);
            if total < *best_total
                || (total == *best_total && current.as_slice() < best_pairs.as_slice())
            {
                *best_total = total;
                *best_pairs = current.clone();
            }
            return;
        }
        if total > *best_total {
            return;
        }
        let remaining_queries = k - q;
        let need = want - matched;
        // Option: match q to each free target, ascending.
        if matched < want {
            for t in 0..g {
                if used[t] {
                    continue;
                }
                used[t] = true;
                current.push((q, t));
                rec(
                    q + 1,
                    matched + 1,
                    total + cost.get(q, t),
                    k,
                    g,
                    want,
                    cost,
                    used,
                    current,
                    best_total,
                    best_pairs,
                );
                current.pop();
                used[t] = false;
            }
        }
        // Option: leave q unmatched, if enough queries remain to finish.
        if remaining_queries - 1 >= need {
            rec(
                q + 1,
                matched,
                total,
                k,
                g,
                want,
                cost,
                used,
                current,
                best_total,
                best_pairs,
            );
        }
    }

    rec(
        0,
        0,
        0.0,
        k,
        g,
        want,
        cost,
        &mut used,
        &mut current,
        &mut best_total,
        &mut best_pairs,
    );
    Ok(Assignment::new(best_pairs, k))
}

/// Association cost of Eq.-style proposal matching: per (query, instance)
/// pair, `l1 * dice + l2 * bce + l3 * ce` on the prediction's mask and
/// semantic logits.
pub fn proposal_cost(
    pred: &PredictionSet,
    gt: &GtTargets,
    lambdas: AcWeights,
) -> Result<CostMatrix> {
    let k = pred.num_queries();
    let g = gt.num_instances();
    let m = pred.mask_logits.cols();
    for mask in &gt.masks {
        if mask.len() != m {
            return Err(Error::ShapeMismatch {
                context: "proposal_cost",
                expected: format!("{m}"),
                got: format!("{}", mask.len()),
            });
        }
    }
    let mut values = Matrix::zeros(k, g);
    for q in 0..k {
        for t in 0..g {
            let d = dice_loss(pred.mask_logits.row(q), &gt.masks[t]);
            let b = bce_mask(pred.mask_logits.row(q), &gt.masks[t]);
            let c = ce_seg(pred.semantic_logits.row(q), gt.classes[t])?;
            values.set(q, t, lambdas.dice * d + lambdas.bce * b + lambdas.ce * c);
        }
    }
    CostMatrix::new(values)
}

/// Center-matching cost: Euclidean distance between refined query centers
/// and ground-truth instance centers.
pub fn center_cost(query_centers: &Matrix, gt_centers: &Matrix) -> Result<CostMatrix> {
    if query_centers.cols() != 3 || gt_centers.cols() != 3 {
        return Err(Error::ShapeMismatch {
            context: "center_cost",
            expected: "k x 3 and G x 3".into(),
            got: format!(
                "{} x {} and {} x {}",
                query_centers.rows(),
                query_centers.cols(),
                gt_centers.rows(),
                gt_centers.cols()
            ),
        });
    }
    if !query_centers.is_finite() || !gt_centers.is_finite() {
        return Err(Error::NonFinite {
            context: "center_cost",
        });
    }
    let values = Matrix::from_fn(query_centers.rows(), gt_centers.rows(), |q, t| {
        query_centers
            .row(q)
            .iter()
            .zip(gt_centers.row(t))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    });
    CostMatrix::new(values)
}
