//! COCO-style evaluation math: greedy score-ordered matching, cumulative
//! precision/recall curves, all-point-interpolated average precision and the
//! mAP@50 / mAP@50-95 summaries.

use crate::decode::Detection;
use crate::loss::{iou, BBox};

/// One image's detections and ground truths.
#[derive(Debug, Clone, Default)]
pub struct EvalSample {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<(BBox, usize)>,
}

/// Matches a sample's detections of one class against its ground truths.
/// Detections are visited in score-descending order (ties by original index);
/// each takes the unmatched ground truth with the highest IoU >= `iou_thresh`.
/// Returns (detection index, tp) pairs in visit order.
pub fn match_class(
    dets: &[Detection],
    gts: &[(BBox, usize)],
    class_id: usize,
    iou_thresh: f64,
) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class_id)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));

    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].1 == class_id).collect();
    let mut taken = vec![false; gt_idx.len()];
    let mut out = Vec::with_capacity(order.len());
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_idx.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let ov = iou(&dets[di].bbox, &gts[gi].0);
            if ov >= iou_thresh && best.map_or(true, |(_, b)| ov > b) {
                best = Some((slot, ov));
            }
        }
        if let Some((slot, _)) = best {
            taken[slot] = true;
            out.push((di, true));
        } else {
            out.push((di, false));
        }
    }
    out
}

/// Cumulative precision/recall at each score cut, from tp flags already in
/// score-descending order. `num_gt` must be positive for recall to be defined.
pub fn precision_recall(tp_flags: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    for (i, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    (precision, recall)
}

/// All-point interpolated AP: the precision envelope is made monotone
/// non-increasing from the right, then integrated over the recall steps.
pub fn average_precision(precision: &[f64], recall: &[f64]) -> f64 {
    assert_eq!(precision.len(), recall.len());
    if precision.is_empty() {
        return 0.0;
    }
    let mut env = precision.to_vec();
    for i in (0..env.len() - 1).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..env.len() {
        ap += (recall[i] - prev_r) * env[i];
        prev_r = recall[i];
    }
    ap
}

/// Per-class AP at one IoU threshold over a set of samples. `None` marks a
/// class with zero ground truths (skipped from the mean).
pub fn per_class_ap(samples: &[EvalSample], num_classes: usize, iou_thresh: f64) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|class_id| {
            let num_gt: usize = samples
                .iter()
                .map(|s| s.ground_truths.iter().filter(|g| g.1 == class_id).count())
                .sum();
            if num_gt == 0 {
                return None;
            }
            // (score, sample idx, det idx, tp), pooled over samples
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (si, s) in samples.iter().enumerate() {
                for (di, tp) in match_class(&s.detections, &s.ground_truths, class_id, iou_thresh) {
                    pooled.push((s.detections[di].score, si, di, tp));
                }
            }
            pooled.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
            let (p, r) = precision_recall(&flags, num_gt);
            Some(average_precision(&p, &r))
        })
        .collect()
}

/// Unweighted mean over evaluable classes; 0 when nothing is evaluable.
pub fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = per_class.iter().filter_map(|v| *v).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn map_at(samples: &[EvalSample], num_classes: usize, iou_thresh: f64) -> f64 {
    mean_ap(&per_class_ap(samples, num_classes, iou_thresh))
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// mAP@50 and mAP@50-95.
pub fn map_coco(samples: &[EvalSample], num_classes: usize) -> (f64, f64) {
    let map50 = map_at(samples, num_classes, 0.5);
    let sum: f64 = coco_thresholds()
        .iter()
        .map(|&t| map_at(samples, num_classes, t))
        .sum();
    (map50, sum / 10.0)
}
