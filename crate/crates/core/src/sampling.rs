//! Representative-point selection: exact greedy farthest point sampling,
//! its weighted variant whose per-voxel weights are trained to peak near
//! instance centers, and the class-aware voxel sampler that bounds
//! cross-attention memory.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::geometry::VoxelScene;
use crate::init::xavier;
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Fps,
    WeightedFps,
    ClassAware,
    Uniform,
}

/// Ordered, duplicate-free selection of voxel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub indices: Vec<usize>,
    pub kind: SampleKind,
}

/// Clamped per-voxel sampling weights plus the sharpness hyperparameter
/// `alpha` of their supervision target `e^(-alpha * ||o*||)`.
#[derive(Debug, Clone)]
pub struct SampleWeights {
    pub w: Vec<f64>,
    pub alpha: f64,
}

impl SampleWeights {
    /// Clamps raw head outputs into [0, 1].
    pub fn from_raw(raw: &[f64], alpha: f64) -> Self {
        SampleWeights {
            w: raw.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
            alpha,
        }
    }

    /// Supervision-target weights: `e^(-alpha * ||o*||)` on foreground,
    /// zero on background. Useful as an oracle for sampling-quality tests.
    pub fn oracle(vs: &VoxelScene, alpha: f64) -> Self {
        let w = (0..vs.num_voxels())
            .map(|i| {
                if vs.fg_mask[i] {
                    let n: f64 = vs
                        .gt_offsets
                        .row(i)
                        .iter()
                        .map(|&x| x * x)
                        .sum::<f64>()
                        .sqrt();
                    (-alpha * n).exp()
                } else {
                    0.0
                }
            })
            .collect();
        SampleWeights { w, alpha }
    }
}

fn sq_dist(coords: &Matrix, a: usize, b: usize) -> f64 {
    coords
        .row(a)
        .iter()
        .zip(coords.row(b))
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Greedy farthest point sampling: start at `seed_index`, then repeatedly
/// add the point with the largest distance to the selected set. Ties break
/// to the lowest index.
pub fn fps(coords: &Matrix, k: usize, seed_index: usize) -> Result<SampleSet> {
    let m = coords.rows();
    if k == 0 || k > m {
        return Err(Error::SampleTooLarge {
            requested: k,
            available: m,
        });
    }
    if seed_index >= m {
        return Err(Error::SampleTooLarge {
            requested: seed_index,
            available: m,
        });
    }
    let mut selected = vec![false; m];
    let mut indices = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = seed_index;
    selected[current] = true;
    indices.push(current);
    while indices.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..m {
            let d = sq_dist(coords, i, current).min(min_d[i]);
            min_d[i] = d;
            if selected[i] {
                continue;
            }
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        current = best;
        selected[current] = true;
        indices.push(current);
    }
    Ok(SampleSet {
        indices,
        kind: SampleKind::Fps,
    })
}

/// Weighted farthest point sampling (scores `w_i * d_min(i)`). The seed is
/// the highest-weight voxel; all ties break to the lowest index.
pub fn weighted_fps(coords: &Matrix, weights: &SampleWeights, k: usize) -> Result<SampleSet> {
    let m = coords.rows();
    if k == 0 || k > m {
        return Err(Error::SampleTooLarge {
            requested: k,
            available: m,
        });
    }
    assert_eq!(weights.w.len(), m, "weight length");
    let seed = weights
        .w
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap();

    let mut selected = vec![false; m];
    let mut indices = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = seed;
    selected[current] = true;
    indices.push(current);
    while indices.len() < k {
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..m {
            let d = sq_dist(coords, i, current).min(min_d[i]);
            min_d[i] = d;
            if selected[i] {
                continue;
            }
            let score = weights.w[i] * d.sqrt();
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        current = best;
        selected[current] = true;
        indices.push(current);
    }
    Ok(SampleSet {
        indices,
        kind: SampleKind::WeightedFps,
    })
}

/// Foreground weight loss: mean over foreground voxels of
/// `|w_i - e^(-alpha * ||o*_i||)|`.
pub fn loss_fore(weights: &[f64], gt_offsets: &Matrix, fg_mask: &[bool], alpha: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..weights.len() {
        if !fg_mask[i] {
            continue;
        }
        let n: f64 = gt_offsets
            .row(i)
            .iter()
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        sum += (weights[i] - (-alpha * n).exp()).abs();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Background weight loss: mean over background voxels of `|w_i|`.
pub fn loss_back(weights: &[f64], fg_mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        if fg_mask[i] {
            continue;
        }
        sum += w.abs();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Tape version of [`loss_fore`]; `weights` is an M x 1 column.
pub fn loss_fore_var(
    g: &mut Graph,
    weights: Var,
    gt_offsets: &Matrix,
    fg_mask: &[bool],
    alpha: f64,
) -> Var {
    let rows: Vec<usize> = (0..fg_mask.len()).filter(|&i| fg_mask[i]).collect();
    if rows.is_empty() {
        return g.leaf(Matrix::scalar(0.0));
    }
    let mut targets = Matrix::zeros(rows.len(), 1);
    for (r, &i) in rows.iter().enumerate() {
        let n: f64 = gt_offsets
            .row(i)
            .iter()
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        targets.set(r, 0, (-alpha * n).exp());
    }
    let w = g.gather_rows(weights, &rows);
    let t = g.leaf(targets);
    let d = g.sub(w, t);
    let a = g.abs(d);
    g.mean(a)
}

/// Tape version of [`loss_back`].
pub fn loss_back_var(g: &mut Graph, weights: Var, fg_mask: &[bool]) -> Var {
    let rows: Vec<usize> = (0..fg_mask.len()).filter(|&i| !fg_mask[i]).collect();
    if rows.is_empty() {
        return g.leaf(Matrix::scalar(0.0));
    }
    let w = g.gather_rows(weights, &rows);
    let a = g.abs(w);
    g.mean(a)
}

/// One-layer head mapping voxel features to a raw sampling weight, clamped
/// to [0, 1] on the tape.
#[derive(Debug, Clone)]
pub struct WeightHead {
    pub w: Matrix,
    pub b: Matrix,
}

pub struct WeightHeadVars {
    pub w: Var,
    pub b: Var,
}

impl WeightHead {
    pub fn new(feat_dim: usize, rng: &mut impl Rng) -> Self {
        WeightHead {
            w: xavier(feat_dim, 1, rng),
            // Bias starts mid-range so the clamp is not saturated at init.
            b: Matrix::scalar(0.5),
        }
    }

    pub fn param_names(prefix: &str) -> Vec<String> {
        ["w", "b"].iter().map(|s| format!("{prefix}.{s}")).collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn bind(&self, g: &mut Graph) -> WeightHeadVars {
        WeightHeadVars {
            w: g.leaf(self.w.clone()),
            b: g.leaf(self.b.clone()),
        }
    }
}

impl WeightHeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

/// Clamped weights (M x 1) from voxel features.
pub fn predict_weights(g: &mut Graph, head: &WeightHeadVars, feats: Var) -> Var {
    let raw = g.matmul(feats, head.w);
    let raw = g.add_row(raw, head.b);
    g.clamp01(raw)
}

/// Class-aware voxel sampling: take up to `n_per_instance` voxels from each
/// instance (capped at half the instance size), then fill to `total`
/// uniformly from the rest.
pub fn class_aware_sample(
    vs: &VoxelScene,
    n_per_instance: usize,
    total: usize,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    let m = vs.num_voxels();
    if n_per_instance == 0 {
        return Err(Error::InvalidConfig("n_per_instance must be >= 1".into()));
    }
    if total > m {
        return Err(Error::SampleTooLarge {
            requested: total,
            available: m,
        });
    }

    let mut members: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (v, &l) in vs.gt_instance.iter().enumerate() {
        if l >= 0 {
            members.entry(l).or_default().push(v);
        }
    }

    let mut taken = vec![false; m];
    let mut indices: Vec<usize> = Vec::with_capacity(total);
    let mut needed = 0usize;
    for ids in members.values() {
        needed += n_per_instance.min(ids.len() / 2);
    }
    if needed > total {
        return Err(Error::BudgetExceeded { needed, total });
    }
    for ids in members.values() {
        let take = n_per_instance.min(ids.len() / 2);
        let mut pool = ids.clone();
        pool.shuffle(rng);
        for &v in pool.iter().take(take) {
            taken[v] = true;
            indices.push(v);
        }
    }

    let mut rest: Vec<usize> = (0..m).filter(|&v| !taken[v]).collect();
    rest.shuffle(rng);
    for &v in rest.iter().take(total - indices.len()) {
        indices.push(v);
    }
    indices.sort_unstable();
    Ok(SampleSet {
        indices,
        kind: SampleKind::ClassAware,
    })
}

/// Plain uniform sampling without replacement (the ablation baseline for
/// class-aware sampling).
pub fn uniform_sample(m: usize, total: usize, rng: &mut impl Rng) -> Result<SampleSet> {
    if total > m {
        return Err(Error::SampleTooLarge {
            requested: total,
            available: m,
        });
    }
    let mut all: Vec<usize> = (0..m).collect();
    all.shuffle(rng);
    let mut indices: Vec<usize> = all.into_iter().take(total).collect();
    indices.sort_unstable();
    Ok(SampleSet {
        indices,
        kind: SampleKind::Uniform,
    })
}

/// Mean distance from sampled voxels to their nearest ground-truth center.
/// Quality measure used to compare plain against weighted fps.
pub fn mean_dist_to_nearest_center(
    coords: &Matrix,
    sample: &SampleSet,
    centers: &[[f64; 3]],
) -> f64 {
    if centers.is_empty() || sample.indices.is_empty() {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for &i in &sample.indices {
        let row = coords.row(i);
        let mut best = f64::INFINITY;
        for c in centers {
            let d: f64 = row.iter().zip(c).map(|(&x, &y)| (x - y) * (x - y)).sum();
            best = best.min(d);
        }
        sum += best.sqrt();
    }
    sum / sample.indices.len() as f64
}
