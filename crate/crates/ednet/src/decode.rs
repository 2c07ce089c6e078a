//! Detection decoding from head feature maps: distance-distribution box
//! regression, sigmoid class scores, score threshold + global top-k with no
//! IoU suppression (one-to-one head assumption). Classic NMS is provided for
//! comparison runs only.

use crate::error::{Error, Result};
use crate::loss::{iou, BBox};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Number of bins per box side in the regression distribution.
pub const REG_BINS: usize = 16;

/// Head strides for the four-level XSmall configuration.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Softmax-expectation over one group of regression logits, in cell units.
fn bin_expectation(logits: &[f32]) -> f64 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0.0f64;
    let mut e = 0.0f64;
    for (i, &l) in logits.iter().enumerate() {
        let p = ((l as f64) - m).exp();
        z += p;
        e += i as f64 * p;
    }
    e / z
}

/// Decodes head maps into scored detections.
///
/// Each map must carry `4 * REG_BINS + num_classes` channels. Per cell the
/// four bin distributions give (l, t, r, b) distances in cell units, scaled by
/// the stride around the cell center. Detections above `conf_thresh` are kept
/// and the global top-k by score survive; ordering is deterministic
/// (score desc, then map and cell index asc, then class asc).
pub fn decode(
    head_maps: &[&Tensor],
    strides: &[usize],
    conf_thresh: f64,
    top_k: usize,
) -> Result<Vec<Detection>> {
    if head_maps.len() != strides.len() {
        return Err(Error::Shape(format!(
            "{} head maps but {} strides",
            head_maps.len(),
            strides.len()
        )));
    }
    let nc = head_maps
        .first()
        .map(|m| m.c() as isize - (4 * REG_BINS) as isize)
        .unwrap_or(0);
    if nc <= 0 {
        return Err(Error::Shape(format!(
            "head map has too few channels for {} regression bins",
            REG_BINS
        )));
    }
    let nc = nc as usize;

    // image extent implied by the finest map
    let img_w = (head_maps[0].w() * strides[0]) as f64;
    let img_h = (head_maps[0].h() * strides[0]) as f64;

    struct Candidate {
        det: Detection,
        map: usize,
        cell: usize,
    }
    let mut cands: Vec<Candidate> = Vec::new();

    for (mi, (&map, &stride)) in head_maps.iter().zip(strides).enumerate() {
        if map.c() != 4 * REG_BINS + nc {
            return Err(Error::Shape(format!(
                "head map {mi} has {} channels, expected {}",
                map.c(),
                4 * REG_BINS + nc
            )));
        }
        let (h, w) = (map.h(), map.w());
        let s = stride as f64;
        let mut logits = [0.0f32; REG_BINS];
        for cy in 0..h {
            for cx in 0..w {
                let cell = cy * w + cx;
                // cheap check first: any class above threshold?
                let mut any = false;
                for k in 0..nc {
                    if sigmoid_scalar(map.at(0, 4 * REG_BINS + k, cy, cx)) as f64 > conf_thresh {
                        any = true;
                        break;
                    }
                }
                if !any {
                    continue;
                }
                let mut dist = [0.0f64; 4];
                for side in 0..4 {
                    for b in 0..REG_BINS {
                        logits[b] = map.at(0, side * REG_BINS + b, cy, cx);
                    }
                    dist[side] = bin_expectation(&logits);
                }
                let ccx = (cx as f64 + 0.5) * s;
                let ccy = (cy as f64 + 0.5) * s;
                let bbox = BBox {
                    x1: (ccx - dist[0] * s).clamp(0.0, img_w),
                    y1: (ccy - dist[1] * s).clamp(0.0, img_h),
                    x2: (ccx + dist[2] * s).clamp(0.0, img_w),
                    y2: (ccy + dist[3] * s).clamp(0.0, img_h),
                };
                for k in 0..nc {
                    let score = sigmoid_scalar(map.at(0, 4 * REG_BINS + k, cy, cx)) as f64;
                    if score > conf_thresh {
                        cands.push(Candidate {
                            det: Detection { bbox, class_id: k, score },
                            map: mi,
                            cell,
                        });
                    }
                }
            }
        }
    }

    cands.sort_by(|a, b| {
        b.det
            .score
            .partial_cmp(&a.det.score)
            .unwrap()
            .then(a.map.cmp(&b.map))
            .then(a.cell.cmp(&b.cell))
            .then(a.det.class_id.cmp(&b.det.class_id))
    });
    cands.truncate(top_k);
    Ok(cands.into_iter().map(|c| c.det).collect())
}

/// Background logit: sigmoid is ~2e-9, far below any usable threshold.
const COLD_LOGIT: f32 = -20.0;
/// Regression bins outside the two interpolation bins.
const OFF_BIN_LOGIT: f32 = -40.0;

/// Builds synthetic head maps that decode back to the given boxes.
///
/// For each annotation the finest stride whose cell-unit distances all fit in
/// the bin range is chosen; each side's distance v is encoded as a two-bin
/// distribution (ln(1-w) at floor(v), ln(w) at floor(v)+1) whose softmax
/// expectation reproduces v exactly. Returns how many annotations were
/// injected; the rest could not be represented (too large, or cell collision).
pub fn inject_oracle(
    head_maps: &mut [Tensor],
    strides: &[usize],
    annotations: &[(BBox, usize)],
) -> Result<usize> {
    if head_maps.len() != strides.len() {
        return Err(Error::Shape(format!(
            "{} head maps but {} strides",
            head_maps.len(),
            strides.len()
        )));
    }
    for m in head_maps.iter_mut() {
        let nc = m.c() as isize - (4 * REG_BINS) as isize;
        if nc <= 0 {
            return Err(Error::Shape("head map too narrow for oracle injection".into()));
        }
        for c in 0..m.c() {
            let v = if c < 4 * REG_BINS { 0.0 } else { COLD_LOGIT };
            for y in 0..m.h() {
                for x in 0..m.w() {
                    *m.at_mut(0, c, y, x) = v;
                }
            }
        }
    }
    let mut used: Vec<std::collections::BTreeSet<usize>> =
        head_maps.iter().map(|_| Default::default()).collect();
    let mut injected = 0usize;

    'ann: for (bbox, class_id) in annotations {
        let (cx, cy) = bbox.center();
        for (mi, (&stride, m)) in strides.iter().zip(head_maps.iter_mut()).enumerate() {
            let s = stride as f64;
            let (gx, gy) = ((cx / s).floor() as usize, (cy / s).floor() as usize);
            if gx >= m.w() || gy >= m.h() {
                continue;
            }
            let (ccx, ccy) = ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s);
            let dists = [
                (ccx - bbox.x1) / s,
                (ccy - bbox.y1) / s,
                (bbox.x2 - ccx) / s,
                (bbox.y2 - ccy) / s,
            ];
            let max_d = (REG_BINS - 1) as f64;
            if dists.iter().any(|&d| d < 0.0 || d > max_d) {
                continue;
            }
            let cell = gy * m.w() + gx;
            if !used[mi].insert(cell) {
                continue;
            }
            if *class_id + 4 * REG_BINS >= m.c() {
                return Err(Error::Shape(format!(
                    "class {class_id} does not fit the head's class channels"
                )));
            }
            for (side, &d) in dists.iter().enumerate() {
                let fl = d.floor() as usize;
                let w = d - fl as f64;
                for b in 0..REG_BINS {
                    let logit = if b == fl {
                        if w == 0.0 { 0.0 } else { (1.0 - w).ln() as f32 }
                    } else if b == fl + 1 && w > 0.0 {
                        (w).ln() as f32
                    } else {
                        OFF_BIN_LOGIT
                    };
                    *m.at_mut(0, side * REG_BINS + b, gy, gx) = logit;
                }
            }
            *m.at_mut(0, 4 * REG_BINS + class_id, gy, gx) = 10.0;
            injected += 1;
            continue 'ann;
        }
    }
    Ok(injected)
}

/// Greedy same-class non-maximum suppression, comparison mode only.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order {
            if j != i
                && !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[j].bbox, &dets[i].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::Rng;

    fn head_map(nc: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        Tensor::from_fn(1, 4 * REG_BINS + nc, h, w, |_, c, y, x| f(c, y, x))
    }

    #[test]
    fn uniform_logits_give_centered_half_range_boxes() {
        // single hot interior cell so no image-bound clipping occurs
        let (hy, hx) = (16usize, 16usize);
        let m = head_map(2, 32, 32, |c, y, x| {
            if c < 64 {
                0.3
            } else if (y, x) == (hy, hx) {
                2.0
            } else {
                -40.0
            }
        });
        let dets = decode(&[&m], &[8], 0.25, 1000).unwrap();
        assert_eq!(dets.len(), 2);
        let d = &dets[0];
        let half = 8.0 * (REG_BINS as f64 - 1.0) / 2.0;
        let (ccx, ccy) = ((hx as f64 + 0.5) * 8.0, (hy as f64 + 0.5) * 8.0);
        assert!((d.bbox.x1 - (ccx - half)).abs() < 1e-4);
        assert!((d.bbox.x2 - (ccx + half)).abs() < 1e-4);
        assert!((d.bbox.y1 - (ccy - half)).abs() < 1e-4);
        assert!((d.bbox.y2 - (ccy + half)).abs() < 1e-4);
    }

    #[test]
    fn all_negative_class_logits_give_no_detections() {
        let m = head_map(3, 4, 4, |c, _, _| if c < 64 { 0.0 } else { -40.0 });
        let dets = decode(&[&m], &[8], 0.25, 100).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn hot_cell_hand_decode() {
        // one cell with two-bin logits: expectation 3.25 on each side
        let nc = 1;
        let (by, bx) = (2usize, 3usize);
        let m = head_map(nc, 8, 8, |c, y, x| {
            if (y, x) != (by, bx) {
                return if c >= 64 { -40.0 } else { 0.0 };
            }
            if c >= 64 {
                return 6.0;
            }
            let bin = c % REG_BINS;
            match bin {
                3 => (0.75f32).ln(),
                4 => (0.25f32).ln(),
                _ => -40.0,
            }
        });
        let dets = decode(&[&m], &[8], 0.25, 10).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        let (ccx, ccy) = ((bx as f64 + 0.5) * 8.0, (by as f64 + 0.5) * 8.0);
        assert!((d.bbox.x1 - (ccx - 3.25 * 8.0)).abs() < 1e-4);
        assert!((d.bbox.y2 - (ccy + 3.25 * 8.0)).abs() < 1e-4);
        assert!(d.score > 0.99);
    }

    #[test]
    fn channel_count_mismatch_errors() {
        let m = Tensor::zeros(1, 10, 4, 4);
        assert!(decode(&[&m], &[8], 0.25, 10).is_err());
    }

    #[test]
    fn decode_is_deterministic() {
        let mut r = rng(3);
        let m = Tensor::from_fn(1, 64 + 4, 6, 6, |_, _, _, _| r.gen_range(-2.0..2.0));
        let a = decode(&[&m], &[8], 0.25, 20).unwrap();
        let b = decode(&[&m], &[8], 0.25, 20).unwrap();
        assert_eq!(a, b);
        for w in a.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn oracle_injection_decodes_within_a_pixel() {
        let mut r = rng(21);
        let strides = STRIDES;
        for trial in 0..20 {
            let nc = 10;
            let mut maps: Vec<Tensor> = strides
                .iter()
                .map(|&s| Tensor::zeros(1, 4 * REG_BINS + nc, 640 / s, 640 / s))
                .collect();
            let anns: Vec<(BBox, usize)> = (0..8)
                .map(|_| {
                    let w = r.gen_range(8.0..60.0);
                    let h = r.gen_range(8.0..60.0);
                    let x1 = r.gen_range(0.0..640.0 - w);
                    let y1 = r.gen_range(0.0..640.0 - h);
                    (BBox::new(x1, y1, x1 + w, y1 + h), r.gen_range(0..nc))
                })
                .collect();
            let injected = inject_oracle(&mut maps, &strides, &anns).unwrap();
            let map_refs: Vec<&Tensor> = maps.iter().collect();
            let dets = decode(&map_refs, &strides, 0.25, 1000).unwrap();
            assert_eq!(dets.len(), injected, "trial {trial}");
            for (bbox, class_id) in &anns {
                let hit = dets.iter().any(|d| {
                    d.class_id == *class_id
                        && (d.bbox.x1 - bbox.x1).abs() <= 1.0
                        && (d.bbox.y1 - bbox.y1).abs() <= 1.0
                        && (d.bbox.x2 - bbox.x2).abs() <= 1.0
                        && (d.bbox.y2 - bbox.y2).abs() <= 1.0
                });
                // collisions can drop annotations; if injected, it must match
                if injected == anns.len() {
                    assert!(hit, "trial {trial}: {bbox:?} not recovered");
                }
            }
        }
    }

    #[test]
    fn oracle_injection_skips_oversized_boxes() {
        let strides = STRIDES;
        let mut maps: Vec<Tensor> = strides
            .iter()
            .map(|&s| Tensor::zeros(1, 64 + 2, 640 / s, 640 / s))
            .collect();
        // wider than the coarsest head can express (> 15 cells * 32 px per side)
        let huge = (BBox::new(0.0, 0.0, 639.0, 639.0), 0usize);
        let injected = inject_oracle(&mut maps, &strides, &[huge]).unwrap();
        assert!(injected <= 1);
    }

    #[test]
    fn nms_basic_cases() {
        let d = |x: f64, class_id: usize, score: f64| Detection {
            bbox: BBox::new(x, 0.0, x + 2.0, 2.0),
            class_id,
            score,
        };
        // identical boxes, same class: one survives
        let kept = nms(&[d(0.0, 0, 0.9), d(0.0, 0, 0.8)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        // disjoint: all survive
        let kept = nms(&[d(0.0, 0, 0.9), d(10.0, 0, 0.8)], 0.5);
        assert_eq!(kept.len(), 2);

        // different classes never suppress each other
        let kept = nms(&[d(0.0, 0, 0.9), d(0.0, 1, 0.8)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_matches_quadratic_oracle() {
        let mut r = rng(9);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| {
                    let x = r.gen_range(0.0..40.0);
                    let y = r.gen_range(0.0..40.0);
                    Detection {
                        bbox: BBox::new(x, y, x + r.gen_range(2.0..10.0), y + r.gen_range(2.0..10.0)),
                        class_id: r.gen_range(0..3),
                        score: r.gen_range(0.0..1.0),
                    }
                })
                .collect();
            let fast = nms(&dets, 0.4);

            // O(n^2) reference: repeatedly take the best remaining, drop overlaps
            let mut remaining: Vec<Detection> = dets.clone();
            let mut oracle = Vec::new();
            while !remaining.is_empty() {
                let best = remaining
                    .iter()
                    .enumerate()
                    .max_by(|(ai, a), (bi, b)| {
                        a.score.partial_cmp(&b.score).unwrap().then(bi.cmp(ai))
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                let b = remaining.remove(best);
                remaining.retain(|d| d.class_id != b.class_id || iou(&d.bbox, &b.bbox) <= 0.4);
                oracle.push(b);
            }
            assert_eq!(fast, oracle);
        }
    }
}
