use crate::harness::scene::BoxSet;
use crate::losses::iou;

/// Predictions in descending score order each claim the unclaimed ground
/// truth of highest IoU, provided it reaches `iou_threshold`. Returns
/// `(pred, gt)` index pairs in claim order.
pub fn greedy_match(preds: &BoxSet, gts: &BoxSet, iou_threshold: f64) -> Vec<(usize, usize)> {
    let mut claimed = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for p in preds.order_by_score() {
        if let Some(g) = best_unclaimed(preds, p, gts, &claimed, iou_threshold) {
            claimed[g] = true;
            pairs.push((p, g));
        }
    }
    pairs
}

/// Training assignment: [`greedy_match`], then every ground truth still
/// unmatched takes the unclaimed prediction with the nearest centre, so each
/// object always contributes a box-regression term.
pub fn assign_for_training(
    preds: &BoxSet,
    gts: &BoxSet,
    iou_threshold: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = greedy_match(preds, gts, iou_threshold);
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    for &(p, g) in &pairs {
        pred_used[p] = true;
        gt_used[g] = true;
    }
    for (g, gb) in gts.boxes.iter().enumerate() {
        if gt_used[g] {
            continue;
        }
        let nearest = (0..preds.len())
            .filter(|&p| !pred_used[p])
            .min_by(|&a, &b| {
                let d = |p: usize| {
                    (preds.boxes[p].cx - gb.cx).powi(2) + (preds.boxes[p].cy - gb.cy).powi(2)
                };
                d(a).total_cmp(&d(b))
            });
        if let Some(p) = nearest {
            pred_used[p] = true;
            pairs.push((p, g));
        }
    }
    pairs
}

fn best_unclaimed(
    preds: &BoxSet,
    p: usize,
    gts: &BoxSet,
    claimed: &[bool],
    thr: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gb) in gts.boxes.iter().enumerate() {
        if claimed[g] {
            continue;
        }
        let v = iou(&preds.boxes[p], gb);
        if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((g, v));
        }
    }
    best.map(|(g, _)| g)
}

/// 101-point interpolated average precision over all scenes.
///
/// Predictions from every scene are ranked together by score; each is a
/// true positive if it claims an unclaimed ground truth in its own scene.
/// With no ground truth at all the result is 1 when there are also no
/// predictions and 0 otherwise.
pub fn evaluate_ap(preds: &[BoxSet], gts: &[BoxSet], iou_threshold: f64) -> f64 {
    let total_gt: usize = gts.iter().map(BoxSet::len).sum();
    let total_pred: usize = preds.iter().map(BoxSet::len).sum();
    if total_gt == 0 {
        return if total_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut ranked: Vec<(usize, usize)> = Vec::with_capacity(total_pred);
    for (s, set) in preds.iter().enumerate() {
        ranked.extend((0..set.len()).map(|i| (s, i)));
    }
    ranked.sort_by(|a, b| preds[b.0].scores[b.1].total_cmp(&preds[a.0].scores[a.1]));

    let empty = BoxSet::new();
    let mut claimed: Vec<Vec<bool>> = (0..preds.len())
        .map(|s| vec![false; gts.get(s).map_or(0, BoxSet::len)])
        .collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (s, i) in ranked {
        let g = gts.get(s).unwrap_or(&empty);
        match best_unclaimed(&preds[s], i, g, &claimed[s], iou_threshold) {
            Some(j) => {
                claimed[s][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    interpolated_ap(&curve)
}

/// Mean over recall levels `0, 0.01, …, 1` of the best precision reached at
/// that recall or beyond.
pub fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best_from[k] = best_from[k + 1].max(curve[k].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < curve.len() && curve[k].0 < level - 1e-12 {
            k += 1;
        }
        sum += best_from[k];
    }
    sum / 101.0
}
