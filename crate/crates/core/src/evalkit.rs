//! Instance-segmentation metrics: AP averaged over IoU thresholds
//! 0.50:0.05:0.95, AP50/AP25, and per-class precision/recall at IoU 0.5.
//!
//! Matching is greedy over predictions in descending confidence: each
//! prediction takes the unmatched same-class ground-truth instance of its
//! scene with the highest IoU at or above the threshold. The
//! precision-recall curve integrates with all-points interpolation. This
//! self-contained definition is the oracle for the synthetic benchmarks and
//! may differ in detail from dataset-specific official scripts.

/// IoU thresholds entering the averaged AP metric.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// One predicted instance, voxel indices sorted ascending.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredInstance {
    pub scene: usize,
    pub class: i32,
    pub voxels: Vec<usize>,
    pub confidence: f64,
}

/// One ground-truth instance, voxel indices sorted ascending.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GtInstance {
    pub scene: usize,
    pub class: i32,
    pub voxels: Vec<usize>,
}

/// Per-class metric breakdown.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassEval {
    pub class: i32,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub prec50: f64,
    pub rec50: f64,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub mprec50: f64,
    pub mrec50: f64,
    pub per_class: Vec<ClassEval>,
}

/// IoU of two boolean masks of equal length; two empty masks score 0.
pub fn iou(mask_a: &[bool], mask_b: &[bool]) -> f64 {
    assert_eq!(mask_a.len(), mask_b.len(), "iou mask length");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in mask_a.iter().zip(mask_b) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of two sorted index lists.
pub fn iou_sparse(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

// Greedy matching at one threshold within one class. Returns true/false
// per prediction in processing order (confidence desc, index asc), plus
// the processing order itself.
fn greedy_match(
    preds: &[&PredInstance],
    gts: &[&GtInstance],
    thr: f64,
) -> (Vec<bool>, Vec<usize>) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for &pi in &order {
        let p = preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.scene != p.scene {
                continue;
            }
            let v = iou_sparse(&p.voxels, &g.voxels);
            if v >= thr {
                let better = match best {
                    None => true,
                    Some((bv, bg)) => v > bv || (v == bv && gi < bg),
                };
                if better {
                    best = Some((v, gi));
                }
            }
        }
        if let Some((_, gi)) = best {
            gt_used[gi] = true;
            tp[pi] = true;
        }
    }
    (tp, order)
}

// All-points interpolated AP from per-prediction TP flags (in processing
// order) and the ground-truth count.
fn ap_from_matches(tp_in_order: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    if tp_in_order.is_empty() {
        return 0.0;
    }
    let n = tp_in_order.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (i, &t) in tp_in_order.iter().enumerate() {
        tp_cum += t as usize;
        precisions.push(tp_cum as f64 / (i + 1) as f64);
        recalls.push(tp_cum as f64 / num_gt as f64);
    }
    // Precision envelope (max to the right).
    for i in (0..n - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = recalls[0] * precisions[0];
    for i in 1..n {
        ap += (recalls[i] - recalls[i - 1]) * precisions[i];
    }
    ap
}

// Classes that have at least one ground-truth instance, ascending.
fn gt_classes(gts: &[GtInstance]) -> Vec<i32> {
    let mut set: Vec<i32> = gts.iter().map(|g| g.class).collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// Average precision at one IoU threshold, averaged over classes that have
/// ground truth.
pub fn average_precision(preds: &[PredInstance], gts: &[GtInstance], iou_threshold: f64) -> f64 {
    let classes = gt_classes(gts);
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        total += class_ap(preds, gts, c, iou_threshold);
    }
    total / classes.len() as f64
}

fn class_ap(preds: &[PredInstance], gts: &[GtInstance], class: i32, thr: f64) -> f64 {
    let pc: Vec<&PredInstance> = preds.iter().filter(|p| p.class == class).collect();
    let gc: Vec<&GtInstance> = gts.iter().filter(|g| g.class == class).collect();
    if gc.is_empty() {
        return 0.0;
    }
    let (tp, order) = greedy_match(&pc, &gc, thr);
    let tp_in_order: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
    ap_from_matches(&tp_in_order, gc.len())
}

/// Mean precision and recall at IoU 0.5, averaged over classes present in
/// the ground truth or the predictions (classes absent from both are
/// skipped).
pub fn prec_rec_50(preds: &[PredInstance], gts: &[GtInstance]) -> (f64, f64) {
    let mut classes: Vec<i32> = gts
        .iter()
        .map(|g| g.class)
        .chain(preds.iter().map(|p| p.class))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return (0.0, 0.0);
    }
    let mut psum = 0.0;
    let mut rsum = 0.0;
    for &c in &classes {
        let (p, r) = class_prec_rec(preds, gts, c, 0.5);
        psum += p;
        rsum += r;
    }
    (psum / classes.len() as f64, rsum / classes.len() as f64)
}

fn class_prec_rec(preds: &[PredInstance], gts: &[GtInstance], class: i32, thr: f64) -> (f64, f64) {
    let pc: Vec<&PredInstance> = preds.iter().filter(|p| p.class == class).collect();
    let gc: Vec<&GtInstance> = gts.iter().filter(|g| g.class == class).collect();
    let (tp, _) = greedy_match(&pc, &gc, thr);
    let tp_count = tp.iter().filter(|&&t| t).count();
    let precision = if pc.is_empty() {
        0.0
    } else {
        tp_count as f64 / pc.len() as f64
    };
    let recall = if gc.is_empty() {
        0.0
    } else {
        tp_count as f64 / gc.len() as f64
    };
    (precision, recall)
}

/// Full evaluation: AP over the threshold sweep, AP50, AP25, mPrec50,
/// mRec50, and the per-class breakdown.
pub fn evaluate(preds: &[PredInstance], gts: &[GtInstance]) -> EvalResult {
    let classes = gt_classes(gts);
    let mut per_class = Vec::with_capacity(classes.len());
    let mut union_classes: Vec<i32> = classes.clone();
    union_classes.extend(preds.iter().map(|p| p.class));
    union_classes.sort_unstable();
    union_classes.dedup();

    let mut ap_sum = 0.0;
    let mut ap50_sum = 0.0;
    let mut ap25_sum = 0.0;
    for &c in &classes {
        let sweep: f64 = AP_THRESHOLDS
            .iter()
            .map(|&t| class_ap(preds, gts, c, t))
            .sum::<f64>()
            / AP_THRESHOLDS.len() as f64;
        let a50 = class_ap(preds, gts, c, 0.50);
        let a25 = class_ap(preds, gts, c, 0.25);
        let (p50, r50) = class_prec_rec(preds, gts, c, 0.5);
        per_class.push(ClassEval {
            class: c,
            ap: sweep,
            ap50: a50,
            ap25: a25,
            prec50: p50,
            rec50: r50,
        });
        ap_sum += sweep;
        ap50_sum += a50;
        ap25_sum += a25;
    }
    let nc = classes.len().max(1) as f64;
    let (mprec50, mrec50) = prec_rec_50(preds, gts);
    EvalResult {
        ap: ap_sum / nc,
        ap50: ap50_sum / nc,
        ap25: ap25_sum / nc,
        mprec50,
        mrec50,
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[true, true, false], &[true, true, false]), 1.0);
        assert_eq!(iou(&[true, false, false], &[false, true, false]), 0.0);
        // |a| = |b| = 2, intersection 1 -> 1/3.
        let a = [true, true, false, false];
        let b = [false, true, true, false];
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&[false, false], &[false, false]), 0.0);
    }

    #[test]
    fn iou_sparse_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..100 {
            let n = 30;
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let ai: Vec<usize> = (0..n).filter(|&i| a[i]).collect();
            let bi: Vec<usize> = (0..n).filter(|&i| b[i]).collect();
            assert!((iou(&a, &b) - iou_sparse(&ai, &bi)).abs() < 1e-12);
        }
    }

    fn gt(scene: usize, class: i32, voxels: &[usize]) -> GtInstance {
        GtInstance {
            scene,
            class,
            voxels: voxels.to_vec(),
        }
    }

    fn pred(scene: usize, class: i32, voxels: &[usize], conf: f64) -> PredInstance {
        PredInstance {
            scene,
            class,
            voxels: voxels.to_vec(),
            confidence: conf,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let gts = vec![gt(0, 0, &[0, 1, 2]), gt(0, 1, &[5, 6]), gt(1, 0, &[0, 1])];
        let preds: Vec<PredInstance> = gts
            .iter()
            .map(|g| pred(g.scene, g.class, &g.voxels, 1.0))
            .collect();
        for &t in &AP_THRESHOLDS {
            assert!((average_precision(&preds, &gts, t) - 1.0).abs() < 1e-12);
        }
        let r = evaluate(&preds, &gts);
        assert!((r.ap - 1.0).abs() < 1e-12);
        assert!((r.mprec50 - 1.0).abs() < 1e-12);
        assert!((r.mrec50 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_recall_gives_half_ap50() {
        // Two gt instances of one class; one predicted perfectly, no FPs.
        let gts = vec![gt(0, 0, &[0, 1, 2]), gt(0, 0, &[10, 11, 12])];
        let preds = vec![pred(0, 0, &[0, 1, 2], 0.9)];
        let ap50 = average_precision(&preds, &gts, 0.5);
        assert!((ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_predictions_zero_ap() {
        let gts = vec![gt(0, 0, &[0, 1])];
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        let r = evaluate(&[], &gts);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn wrong_class_predictions_score_zero() {
        let gts = vec![gt(0, 0, &[0, 1]), gt(0, 1, &[4, 5])];
        let preds = vec![pred(0, 1, &[0, 1], 0.9), pred(0, 0, &[4, 5], 0.8)];
        let (p, r) = prec_rec_50(&preds, &gts);
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn three_class_toy_matches_hand_counts() {
        // Class 0: 2 gt, predictions: one perfect, one FP -> prec 1/2, rec 1/2.
        // Class 1: 1 gt, predictions: one perfect -> prec 1, rec 1.
        // Class 2: 1 gt, no predictions -> prec 0, rec 0.
        let gts = vec![
            gt(0, 0, &[0, 1, 2]),
            gt(0, 0, &[10, 11]),
            gt(0, 1, &[20, 21]),
            gt(0, 2, &[30, 31]),
        ];
        let preds = vec![
            pred(0, 0, &[0, 1, 2], 0.9),
            pred(0, 0, &[40, 41], 0.8),
            pred(0, 1, &[20, 21], 0.95),
        ];
        let (p, r) = prec_rec_50(&preds, &gts);
        assert!((p - (0.5 + 1.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!((r - (0.5 + 1.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_prefers_highest_iou() {
        // One prediction overlapping two gts; must take the higher-IoU one.
        let gts = vec![gt(0, 0, &[0, 1, 2, 3]), gt(0, 0, &[3, 4])];
        let preds = vec![pred(0, 0, &[0, 1, 2], 0.9)];
        // IoU with gt0 = 3/4, with gt1 = 0/5.
        let ap25 = average_precision(&preds, &gts, 0.25);
        assert!((ap25 - 0.5).abs() < 1e-12);
    }

    fn random_eval_case(seed: u64) -> (Vec<PredInstance>, Vec<GtInstance>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes = rng.gen_range(1..3);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for s in 0..scenes {
            let n_gt = rng.gen_range(1..5);
            let mut next = 0usize;
            for _ in 0..n_gt {
                let size = rng.gen_range(2..8);
                let voxels: Vec<usize> = (next..next + size).collect();
                next += size + rng.gen_range(0..3);
                let class = rng.gen_range(0..3);
                gts.push(gt(s, class, &voxels));
                // Prediction with noisy overlap.
                if rng.gen_bool(0.8) {
                    let keep = rng.gen_range(1..=size);
                    let pv: Vec<usize> = voxels[..keep].to_vec();
                    let pclass = if rng.gen_bool(0.85) {
                        class
                    } else {
                        rng.gen_range(0..3)
                    };
                    preds.push(pred(s, pclass, &pv, rng.gen_range(0.1..1.0)));
                }
            }
            // Noise predictions.
            for _ in 0..rng.gen_range(0..3) {
                let size = rng.gen_range(1..5);
                let start = rng.gen_range(100..200);
                preds.push(pred(
                    s,
                    rng.gen_range(0..3),
                    &(start..start + size).collect::<Vec<_>>(),
                    rng.gen_range(0.1..1.0),
                ));
            }
        }
        (preds, gts)
    }

    #[test]
    fn ap_ordering_holds_on_random_sets() {
        for seed in 0..100 {
            let (preds, gts) = random_eval_case(seed);
            let r = evaluate(&preds, &gts);
            assert!(
                r.ap <= r.ap50 + 1e-12 && r.ap50 <= r.ap25 + 1e-12,
                "seed {seed}: ap {} ap50 {} ap25 {}",
                r.ap,
                r.ap50,
                r.ap25
            );
        }
    }

    #[test]
    fn duplicate_fp_never_raises_ap() {
        for seed in 100..180 {
            let (mut preds, gts) = random_eval_case(seed);
            if preds.is_empty() {
                continue;
            }
            let before = average_precision(&preds, &gts, 0.5);
            // Duplicate the first prediction at lower confidence.
            let mut dup = preds[0].clone();
            dup.confidence *= 0.5;
            preds.push(dup);
            let after = average_precision(&preds, &gts, 0.5);
            assert!(
                after <= before + 1e-12,
                "seed {seed}: {after} > {before}"
            );
        }
    }

    #[test]
    fn confidence_rescale_invariance() {
        for seed in 200..260 {
            let (preds, gts) = random_eval_case(seed);
            let before = evaluate(&preds, &gts);
            let scaled: Vec<PredInstance> = preds
                .iter()
                .map(|p| PredInstance {
                    confidence: p.confidence * 0.37,
                    ..p.clone()
                })
                .collect();
            let after = evaluate(&scaled, &gts);
            assert_eq!(before, after, "seed {seed}");
        }
    }
}
