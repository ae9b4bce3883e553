//! Mask and semantic losses: dice, binary cross-entropy on logits,
//! semantic cross-entropy, the per-layer association loss over matched
//! query/instance pairs, and the confidence score used to rank predictions.

use crate::autodiff::{sigmoid, softplus, Graph, Var};
use crate::linalg::Matrix;
use crate::matching::Assignment;
use crate::{Error, Result};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Down-weight applied to the no-object cross-entropy of unmatched queries.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

/// Per-query predictions over one voxel domain.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// k x M mask logits.
    pub mask_logits: Matrix,
    /// k x (S+1) semantic logits; the last column is the no-object class.
    pub semantic_logits: Matrix,
    /// Confidence per query, in [0, 1].
    pub confidence: Vec<f64>,
}

impl PredictionSet {
    pub fn num_queries(&self) -> usize {
        self.mask_logits.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mask_logits.is_finite() || !self.semantic_logits.is_finite() {
            return Err(Error::NonFinite {
                context: "prediction set",
            });
        }
        if self.semantic_logits.rows() != self.mask_logits.rows()
            || self.confidence.len() != self.mask_logits.rows()
        {
            return Err(Error::ShapeMismatch {
                context: "prediction set",
                expected: format!("{} rows", self.mask_logits.rows()),
                got: format!(
                    "{} / {}",
                    self.semantic_logits.rows(),
                    self.confidence.len()
                ),
            });
        }
        if self.confidence.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidConfig("confidence out of [0,1]".into()));
        }
        Ok(())
    }
}

/// Smoothed dice loss of one mask-logit row against a binary target.
pub fn dice_loss(logits_row: &[f64], gt_mask: &[bool]) -> f64 {
    assert_eq!(logits_row.len(), gt_mask.len(), "dice length");
    let mut inter = 0.0;
    let mut pred_sum = 0.0;
    let mut gt_sum = 0.0;
    for (&l, &g) in logits_row.iter().zip(gt_mask) {
        let p = sigmoid(l);
        pred_sum += p;
        if g {
            inter += p;
            gt_sum += 1.0;
        }
    }
    1.0 - (2.0 * inter + DICE_EPS) / (pred_sum + gt_sum + DICE_EPS)
}

/// Mean binary cross-entropy of one mask-logit row, computed in logit
/// space: `softplus(l) - l * t`.
pub fn bce_mask(logits_row: &[f64], gt_mask: &[bool]) -> f64 {
    assert_eq!(logits_row.len(), gt_mask.len(), "bce length");
    if logits_row.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits_row
        .iter()
        .zip(gt_mask)
        .map(|(&l, &g)| softplus(l) - l * (g as u8 as f64))
        .sum();
    sum / logits_row.len() as f64
}

/// Cross-entropy of one semantic-logit row against a target class index
/// (the last class, index S, is no-object).
pub fn ce_seg(sem_logits_row: &[f64], target_class: usize) -> Result<f64> {
    if target_class >= sem_logits_row.len() {
        return Err(Error::TargetOutOfRange {
            target: target_class,
            max: sem_logits_row.len() - 1,
        });
    }
    let m = sem_logits_row
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m + sem_logits_row
        .iter()
        .map(|&z| (z - m).exp())
        .sum::<f64>()
        .ln();
    Ok(lse - sem_logits_row[target_class])
}

/// Weights of the association-cost components (dice, mask BCE, semantic CE).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AcWeights {
    pub dice: f64,
    pub bce: f64,
    pub ce: f64,
}

impl Default for AcWeights {
    fn default() -> Self {
        AcWeights {
            dice: 2.0,
            bce: 5.0,
            ce: 2.0,
        }
    }
}

/// Ground-truth targets over one voxel domain: one binary mask and one
/// semantic class per instance, plus the instance center.
#[derive(Debug, Clone)]
pub struct GtTargets {
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
}

impl GtTargets {
    pub fn num_instances(&self) -> usize {
        self.masks.len()
    }
}

/// Per-layer association loss on plain values: matched pairs contribute
/// `dice + bce + ce` with [`AcWeights`], unmatched queries contribute the
/// down-weighted no-object cross-entropy. Normalized by query count.
pub fn layer_ac_loss(
    mask_logits: &Matrix,
    sem_logits: &Matrix,
    assignment: &Assignment,
    gt: &GtTargets,
    lambdas: AcWeights,
) -> Result<f64> {
    let k = mask_logits.rows();
    let num_classes = sem_logits.cols() - 1;
    let mut total = 0.0;
    for q in 0..k {
        match assignment.target_of(q) {
            Some(g) => {
                let d = dice_loss(mask_logits.row(q), &gt.masks[g]);
                let b = bce_mask(mask_logits.row(q), &gt.masks[g]);
                let c = ce_seg(sem_logits.row(q), gt.classes[g])?;
                total += lambdas.dice * d + lambdas.bce * b + lambdas.ce * c;
            }
            None => {
                total += NO_OBJECT_WEIGHT * ce_seg(sem_logits.row(q), num_classes)?;
            }
        }
    }
    Ok(total / k as f64)
}

/// Tape version of [`layer_ac_loss`].
pub fn layer_ac_loss_var(
    g: &mut Graph,
    mask_logits: Var,
    sem_logits: Var,
    assignment: &Assignment,
    gt: &GtTargets,
    lambdas: AcWeights,
) -> Var {
    let k = g.value(mask_logits).rows();
    let m = g.value(mask_logits).cols();
    let num_classes = g.value(sem_logits).cols() - 1;

    let matched: Vec<(usize, usize)> = assignment.pairs.clone();
    let unmatched: Vec<usize> = (0..k).filter(|&q| assignment.target_of(q).is_none()).collect();

    let mut terms: Vec<Var> = Vec::new();

    if !matched.is_empty() {
        let qrows: Vec<usize> = matched.iter().map(|&(q, _)| q).collect();
        let p = matched.len();

        // Dice + BCE over matched mask rows, vectorized across pairs.
        let rows = g.gather_rows(mask_logits, &qrows);
        let probs = g.sigmoid(rows);
        let mut gt_mat = Matrix::zeros(p, m);
        let mut gt_sums = Matrix::zeros(p, 1);
        for (r, &(_, t)) in matched.iter().enumerate() {
            let mut s = 0.0;
            for (j, &b) in gt.masks[t].iter().enumerate() {
                if b {
                    gt_mat.set(r, j, 1.0);
                    s += 1.0;
                }
            }
            gt_sums.set(r, 0, s);
        }
        let gt_const = g.leaf(gt_mat);
        let gt_sum_const = g.leaf(gt_sums);

        let inter = {
            let prod = g.mul(probs, gt_const);
            g.sum_cols(prod)
        };
        let pred_sum = g.sum_cols(probs);
        let denom = {
            let s = g.add(pred_sum, gt_sum_const);
            g.add_scalar(s, DICE_EPS)
        };
        let numer = {
            let s = g.scale(inter, 2.0);
            g.add_scalar(s, DICE_EPS)
        };
        let ratio = g.div(numer, denom);
        let dice = {
            let n = g.neg(ratio);
            g.add_scalar(n, 1.0)
        };
        let dice_sum = g.sum(dice);
        terms.push(g.scale(dice_sum, lambdas.dice));

        let bce = {
            let sp = g.softplus(rows);
            let lt = g.mul(rows, gt_const);
            let diff = g.sub(sp, lt);
            let per_pair = g.sum_cols(diff);
            g.scale(per_pair, 1.0 / m as f64)
        };
        let bce_sum = g.sum(bce);
        terms.push(g.scale(bce_sum, lambdas.bce));

        // Semantic CE over matched rows.
        let sem_rows = g.gather_rows(sem_logits, &qrows);
        let log_probs = g.log_softmax_rows(sem_rows);
        let targets: Vec<usize> = matched.iter().map(|&(_, t)| gt.classes[t]).collect();
        let picked = g.select_per_row(log_probs, &targets);
        let nll = g.neg(picked);
        let ce_sum = g.sum(nll);
        terms.push(g.scale(ce_sum, lambdas.ce));
    }

    if !unmatched.is_empty() {
        let sem_rows = g.gather_rows(sem_logits, &unmatched);
        let log_probs = g.log_softmax_rows(sem_rows);
        let targets: Vec<usize> = vec![num_classes; unmatched.len()];
        let picked = g.select_per_row(log_probs, &targets);
        let nll = g.neg(picked);
        let s = g.sum(nll);
        terms.push(g.scale(s, NO_OBJECT_WEIGHT));
    }

    let mut acc = g.leaf(Matrix::scalar(0.0));
    for t in terms {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / k as f64)
}

/// Total loss over all decoder layers plus the voxel-level terms, on plain
/// values. Top-level balance weights are all one.
#[allow(clippy::too_many_arguments)]
pub fn loss_all(
    layer_preds: &[PredictionSet],
    assignments: &[Assignment],
    gt: &GtTargets,
    lambdas: AcWeights,
    offsets: &Matrix,
    gt_offsets: &Matrix,
    weights: &[f64],
    fg_mask: &[bool],
    alpha: f64,
) -> Result<f64> {
    assert_eq!(layer_preds.len(), assignments.len(), "layer counts");
    let mut total = 0.0;
    for (pred, assignment) in layer_preds.iter().zip(assignments) {
        total += layer_ac_loss(
            &pred.mask_logits,
            &pred.semantic_logits,
            assignment,
            gt,
            lambdas,
        )?;
    }
    total += crate::encoding::loss_reg(offsets, gt_offsets, fg_mask);
    total += crate::encoding::loss_dir(offsets, gt_offsets, fg_mask);
    total += crate::sampling::loss_fore(weights, gt_offsets, fg_mask, alpha);
    total += crate::sampling::loss_back(weights, fg_mask);
    Ok(total)
}

/// Confidence per query: dominant real-class softmax probability times the
/// mean sigmoid of positive mask logits. Queries with no positive logits
/// score zero.
pub fn confidence(pred: &PredictionSet) -> Vec<f64> {
    let k = pred.num_queries();
    let num_classes = pred.semantic_logits.cols() - 1;
    let mut out = Vec::with_capacity(k);
    for q in 0..k {
        let sem = pred.semantic_logits.row(q);
        let m = sem.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sem.iter().map(|&v| (v - m).exp()).sum();
        let best_real = sem[..num_classes]
            .iter()
            .map(|&v| (v - m).exp() / z)
            .fold(0.0, f64::max);

        let mut mask_sum = 0.0;
        let mut mask_n = 0usize;
        for &l in pred.mask_logits.row(q) {
            if l > 0.0 {
                mask_sum += sigmoid(l);
                mask_n += 1;
            }
        }
        if mask_n == 0 {
            out.push(0.0);
        } else {
            out.push(best_real * mask_sum / mask_n as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Assignment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_near_perfect_overlap() {
        let mut logits = vec![-20.0; 20];
        let mut gt = vec![false; 20];
        for i in 0..10 {
            logits[i] = 20.0;
            gt[i] = true;
        }
        assert!(dice_loss(&logits, &gt) <= 0.05);
    }

    #[test]
    fn dice_all_negative_closed_form() {
        // sigmoid(-20) ~ 0: 1 - (0 + 1)/(0 + 10 + 1) = 1 - 1/11.
        let logits = vec![-20.0; 20];
        let mut gt = vec![false; 20];
        for g in gt.iter_mut().take(10) {
            *g = true;
        }
        let want = 1.0 - 1.0 / 11.0;
        assert!((dice_loss(&logits, &gt) - want).abs() < 1e-6);
    }

    #[test]
    fn dice_empty_gt_all_negative_is_zero() {
        let logits = vec![-20.0; 15];
        let gt = vec![false; 15];
        assert!(dice_loss(&logits, &gt).abs() < 1e-6);
    }

    #[test]
    fn dice_range_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let d = dice_loss(&logits, &gt);
            assert!((0.0..=1.0).contains(&d), "dice out of range: {d}");
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pl: Vec<f64> = perm.iter().map(|&i| logits[i]).collect();
            let pg: Vec<bool> = perm.iter().map(|&i| gt[i]).collect();
            assert!((dice_loss(&pl, &pg) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_examples() {
        let zeros = vec![0.0; 8];
        let gt = vec![true, false, true, false, true, false, true, false];
        assert!((bce_mask(&zeros, &gt) - std::f64::consts::LN_2).abs() < 1e-12);

        let perfect: Vec<f64> = gt.iter().map(|&g| if g { 30.0 } else { -30.0 }).collect();
        assert!(bce_mask(&perfect, &gt) < 1e-9);
    }

    #[test]
    fn bce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let logits: Vec<f64> = (0..25).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let gt: Vec<bool> = (0..25).map(|_| rng.gen_bool(0.5)).collect();
        // Direct probability-space computation.
        let mut want = 0.0;
        for (&l, &g) in logits.iter().zip(&gt) {
            let p = 1.0 / (1.0 + (-l).exp());
            want -= if g { p.ln() } else { (1.0 - p).ln() };
        }
        want /= logits.len() as f64;
        assert!((bce_mask(&logits, &gt) - want).abs() < 1e-9);
    }

    #[test]
    fn ce_examples() {
        let mut row = vec![0.0; 4];
        row[2] = 20.0;
        assert!(ce_seg(&row, 2).unwrap() < 1e-6);

        let uniform = vec![0.3; 4];
        assert!((ce_seg(&uniform, 1).unwrap() - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            ce_seg(&uniform, 4),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn ce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = 4;
        let z: f64 = row.iter().map(|&v| v.exp()).sum();
        let want = -(row[t].exp() / z).ln();
        assert!((ce_seg(&row, t).unwrap() - want).abs() < 1e-9);
    }

    fn toy_case(
        seed: u64,
        k: usize,
        g_count: usize,
        m: usize,
    ) -> (Matrix, Matrix, GtTargets, Assignment) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_logits = Matrix::from_fn(k, m, |_, _| rng.gen_range(-3.0..3.0));
        let sem_logits = Matrix::from_fn(k, 4, |_, _| rng.gen_range(-2.0..2.0));
        let masks: Vec<Vec<bool>> = (0..g_count)
            .map(|_| (0..m).map(|_| rng.gen_bool(0.3)).collect())
            .collect();
        let classes: Vec<usize> = (0..g_count).map(|_| rng.gen_range(0..3)).collect();
        let centers = vec![[0.0; 3]; g_count];
        let pairs: Vec<(usize, usize)> = (0..g_count.min(k)).map(|i| (i, i)).collect();
        let assignment = Assignment::new(pairs, k);
        (
            mask_logits,
            sem_logits,
            GtTargets {
                masks,
                classes,
                centers,
            },
            assignment,
        )
    }

    #[test]
    fn layer_ac_loss_graph_matches_plain() {
        let (mask_logits, sem_logits, gt, assignment) = toy_case(34, 5, 3, 18);
        let lambdas = AcWeights::default();
        let plain =
            layer_ac_loss(&mask_logits, &sem_logits, &assignment, &gt, lambdas).unwrap();

        let mut g = Graph::new();
        let ml = g.leaf(mask_logits);
        let sl = g.leaf(sem_logits);
        let v = layer_ac_loss_var(&mut g, ml, sl, &assignment, &gt, lambdas);
        assert!((g.value(v).as_scalar() - plain).abs() < 1e-10);
    }

    #[test]
    fn loss_all_composes_individual_ops() {
        let (mask_logits, sem_logits, gt, assignment) = toy_case(35, 4, 2, 12);
        let lambdas = AcWeights::default();
        let pred = PredictionSet {
            mask_logits: mask_logits.clone(),
            semantic_logits: sem_logits.clone(),
            confidence: vec![0.5; 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let offsets = Matrix::from_fn(12, 3, |_, _| rng.gen_range(-0.4..0.4));
        let gt_offsets = Matrix::from_fn(12, 3, |_, _| rng.gen_range(-0.4..0.4));
        let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fg: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();

        let total = loss_all(
            &[pred.clone(), pred.clone()],
            &[assignment.clone(), assignment.clone()],
            &gt,
            lambdas,
            &offsets,
            &gt_offsets,
            &weights,
            &fg,
            25.0,
        )
        .unwrap();

        // Scripted sum of the individual operations.
        let ac = layer_ac_loss(&mask_logits, &sem_logits, &assignment, &gt, lambdas).unwrap();
        let want = 2.0 * ac
            + crate::encoding::loss_reg(&offsets, &gt_offsets, &fg)
            + crate::encoding::loss_dir(&offsets, &gt_offsets, &fg)
            + crate::sampling::loss_fore(&weights, &gt_offsets, &fg, 25.0)
            + crate::sampling::loss_back(&weights, &fg);
        assert!((total - want).abs() < 1e-12);
    }

    #[test]
    fn loss_all_zero_layers_background_scene_is_zero() {
        let gt = GtTargets {
            masks: vec![],
            classes: vec![],
            centers: vec![],
        };
        let offsets = Matrix::zeros(5, 3);
        let gt_offsets = Matrix::zeros(5, 3);
        let weights = vec![0.0; 5];
        let fg = vec![false; 5];
        let total = loss_all(
            &[],
            &[],
            &gt,
            AcWeights::default(),
            &offsets,
            &gt_offsets,
            &weights,
            &fg,
            25.0,
        )
        .unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn loss_all_single_layer_perfect_is_near_zero() {
        // Single-voxel instances: gt offsets are zero, so the direction
        // loss has no contributors and perfection drives everything to ~0.
        let m = 6;
        let masks = vec![
            (0..m).map(|j| j == 0).collect::<Vec<bool>>(),
            (0..m).map(|j| j == 3).collect::<Vec<bool>>(),
        ];
        let classes = vec![0usize, 1];
        let gt = GtTargets {
            masks: masks.clone(),
            classes: classes.clone(),
            centers: vec![[0.0; 3]; 2],
        };
        let k = 3;
        let mask_logits = Matrix::from_fn(k, m, |q, j| {
            if q < 2 && masks[q][j] {
                30.0
            } else {
                -30.0
            }
        });
        let sem_logits = Matrix::from_fn(k, 4, |q, c| {
            let target = if q < 2 { classes[q] } else { 3 };
            if c == target {
                30.0
            } else {
                -30.0
            }
        });
        let pred = PredictionSet {
            mask_logits,
            semantic_logits: sem_logits,
            confidence: vec![1.0, 1.0, 0.0],
        };
        let assignment = Assignment::new(vec![(0, 0), (1, 1)], k);
        let offsets = Matrix::zeros(m, 3);
        let gt_offsets = Matrix::zeros(m, 3);
        let fg = vec![true, false, false, true, false, false];
        let weights: Vec<f64> = fg.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let total = loss_all(
            &[pred],
            &[assignment],
            &gt,
            AcWeights::default(),
            &offsets,
            &gt_offsets,
            &weights,
            &fg,
            25.0,
        )
        .unwrap();
        assert!(total.abs() < 0.15, "total {total}");
    }

    #[test]
    fn confidence_examples() {
        // Semantic prob ~1 on a real class, all mask logits strongly on.
        let pred = PredictionSet {
            mask_logits: Matrix::from_fn(1, 5, |_, _| 20.0),
            semantic_logits: Matrix::from_vec(1, 3, vec![30.0, -30.0, -30.0]),
            confidence: vec![0.0],
        };
        let c = confidence(&pred);
        assert!((c[0] - 1.0).abs() < 1e-6);

        // No positive logits -> 0.
        let pred2 = PredictionSet {
            mask_logits: Matrix::from_fn(1, 5, |_, _| -1.0),
            semantic_logits: Matrix::from_vec(1, 3, vec![30.0, -30.0, -30.0]),
            confidence: vec![0.0],
        };
        assert_eq!(confidence(&pred2)[0], 0.0);
    }

    #[test]
    fn confidence_matches_masked_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mask = Matrix::from_fn(3, 10, |_, _| rng.gen_range(-2.0..2.0));
        let sem = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let pred = PredictionSet {
            mask_logits: mask.clone(),
            semantic_logits: sem.clone(),
            confidence: vec![0.0; 3],
        };
        let got = confidence(&pred);
        for q in 0..3 {
            let z: f64 = sem.row(q).iter().map(|&v| v.exp()).sum();
            let best = sem.row(q)[..3]
                .iter()
                .map(|&v| v.exp() / z)
                .fold(0.0, f64::max);
            let pos: Vec<f64> = mask
                .row(q)
                .iter()
                .filter(|&&l| l > 0.0)
                .map(|&l| 1.0 / (1.0 + (-l).exp()))
                .collect();
            let want = if pos.is_empty() {
                0.0
            } else {
                best * pos.iter().sum::<f64>() / pos.len() as f64
            };
            assert!((got[q] - want).abs() < 1e-9, "query {q}");
            assert!((0.0..=1.0).contains(&got[q]));
        }
    }
}
