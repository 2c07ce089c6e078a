//! IoU, WIoUv1 and WIoUv3 bounding-box regression losses with analytic
//! gradients and the running-mean outlier-focusing mechanism.
//!
//! Detach semantics: the enclosing-box denominator of the distance factor, the
//! focusing coefficient `r` and the outlier ratio `beta` are all treated as
//! constants when differentiating with respect to the predicted box.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Axis-aligned box in corner convention (x1, y1) top-left, (x2, y2)
/// bottom-right, pixel units. Degenerate zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "corner order violated");
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Intersection over union, in [0, 1]. Two zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn l_iou(a: &BBox, b: &BBox) -> f64 {
    1.0 - iou(a, b)
}

/// Squared center distance and the (detached) enclosing-box denominator.
fn distance_terms(pred: &BBox, gt: &BBox) -> (f64, f64) {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let d2 = (px - gx).powi(2) + (py - gy).powi(2);
    let ew = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let eh = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    (d2, ew * ew + eh * eh)
}

/// Distance amplification factor exp(d^2 / (W^2 + H^2)), always >= 1.
/// The denominator is a detached constant in all gradient computations.
pub fn r_wiou(pred: &BBox, gt: &BBox) -> f64 {
    let (d2, denom) = distance_terms(pred, gt);
    if denom == 0.0 {
        1.0
    } else {
        (d2 / denom).exp()
    }
}

/// WIoUv1 = R_WIoU * L_IoU. Zero iff the boxes coincide exactly.
pub fn wiou_v1(pred: &BBox, gt: &BBox) -> f64 {
    r_wiou(pred, gt) * l_iou(pred, gt)
}

/// Running state for the v3 outlier mechanism: the exponential moving average
/// of the IoU loss plus the focusing hyperparameters.
///
/// State mutation is single-writer; concurrent use requires external
/// serialization of updates.
#[derive(Debug, Clone)]
pub struct WIoUState {
    pub alpha: f64,
    pub delta: f64,
    pub momentum: f64,
    pub running_mean: f64,
    pub initialized: bool,
}

impl WIoUState {
    pub fn new(alpha: f64, delta: f64, momentum: f64) -> Self {
        assert!(alpha > 1.0 && delta > 0.0 && momentum > 0.0 && momentum < 1.0);
        Self { alpha, delta, momentum, running_mean: 0.0, initialized: false }
    }

    /// Recommended constants from the WIoU reference implementation.
    pub fn default_params() -> Self {
        Self::new(1.9, 3.0, 1e-2)
    }

    /// Outlier ratio beta = L*_IoU / mean(L_IoU), with the numerator detached.
    /// The first observation initializes the running mean, making beta = 1.
    pub fn beta(&mut self, l_iou_star: f64) -> f64 {
        if !self.initialized {
            self.running_mean = l_iou_star;
            self.initialized = true;
        }
        if self.running_mean == 0.0 {
            1.0
        } else {
            l_iou_star / self.running_mean
        }
    }

    /// Non-monotonic focusing coefficient r = beta / (delta * alpha^(beta - delta)).
    pub fn r_focus(&self, beta: f64) -> f64 {
        beta / (self.delta * self.alpha.powf(beta - self.delta))
    }

    fn update_mean(&mut self, l: f64) {
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * l;
    }
}

/// All intermediates of one WIoUv3 evaluation, with the running mean left
/// untouched. Useful for gradient checks that must freeze `r` and the
/// enclosing-box denominator.
#[derive(Debug, Clone, Copy)]
pub struct WIoUTerms {
    pub l_iou: f64,
    pub r_wiou: f64,
    pub beta: f64,
    pub r: f64,
    pub denom: f64,
    pub loss: f64,
}

pub fn wiou_v3_terms(pred: &BBox, gt: &BBox, state: &mut WIoUState) -> WIoUTerms {
    let l = l_iou(pred, gt);
    let (d2, denom) = distance_terms(pred, gt);
    let rw = if denom == 0.0 { 1.0 } else { (d2 / denom).exp() };
    // beta uses the pre-update running mean
    let beta = state.beta(l);
    let r = state.r_focus(beta);
    WIoUTerms { l_iou: l, r_wiou: rw, beta, r, denom, loss: r * rw * l }
}

/// WIoUv3 loss. Computes the focused loss from the pre-update running mean,
/// then folds the observed IoU loss into the moving average.
pub fn wiou_v3(pred: &BBox, gt: &BBox, state: &mut WIoUState) -> f64 {
    let terms = wiou_v3_terms(pred, gt, state);
    state.update_mean(terms.l_iou);
    terms.loss
}

/// Analytic gradient of the WIoUv3 loss over (x1, y1, x2, y2) of `pred`,
/// holding `r`, `beta` and the enclosing-box denominator constant. Does not
/// advance the running mean.
pub fn grad_wiou_v3(pred: &BBox, gt: &BBox, state: &mut WIoUState) -> [f64; 4] {
    let terms = wiou_v3_terms(pred, gt, state);
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();

    // d(r_wiou)/dp via d(d^2)/dp; each corner moves the center by 1/2
    let dd2 = [px - gx, py - gy, px - gx, py - gy];
    let drw: Vec<f64> = dd2
        .iter()
        .map(|&d| if terms.denom == 0.0 { 0.0 } else { terms.r_wiou * d / terms.denom })
        .collect();

    // d(iou)/dp
    let iw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    let mut dliou = [0.0f64; 4];
    if iw > 0.0 && ih > 0.0 {
        let inter = iw * ih;
        let union = pred.area() + gt.area() - inter;
        let pw = pred.width();
        let ph = pred.height();
        // exact coordinate ties take the half-weight subgradient, so the
        // perfectly-overlapping case cancels to zero
        let tie = |a: f64, b: f64, active_gt: bool| -> f64 {
            if a == b {
                0.5
            } else if active_gt {
                1.0
            } else {
                0.0
            }
        };
        let di = [
            -ih * tie(pred.x1, gt.x1, pred.x1 > gt.x1),
            -iw * tie(pred.y1, gt.y1, pred.y1 > gt.y1),
            ih * tie(pred.x2, gt.x2, pred.x2 < gt.x2),
            iw * tie(pred.y2, gt.y2, pred.y2 < gt.y2),
        ];
        let da = [-ph, -pw, ph, pw];
        for i in 0..4 {
            let du = da[i] - di[i];
            let diou = (di[i] * union - inter * du) / (union * union);
            dliou[i] = -diou;
        }
    }

    let mut grad = [0.0f64; 4];
    for i in 0..4 {
        grad[i] = terms.r * (drw[i] * terms.l_iou + terms.r_wiou * dliou[i]);
    }
    grad
}

/// Outcome of a randomized finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub trials: usize,
    pub evaluated: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// True when the pair sits at (or within `tol` of) an IoU kink: a coordinate
/// tie or an intersection-boundary crossing, where the loss is legitimately
/// non-smooth.
pub fn is_kink_pair(pred: &BBox, gt: &BBox, tol: f64) -> bool {
    let ties = [
        pred.x1 - gt.x1,
        pred.y1 - gt.y1,
        pred.x2 - gt.x2,
        pred.y2 - gt.y2,
    ];
    if ties.iter().any(|t| t.abs() < tol) {
        return true;
    }
    let iw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    iw.abs() < tol || ih.abs() < tol
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let cx = rng.gen_range(0.0..extent);
    let cy = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    BBox::from_center(cx, cy, w, h)
}

/// Central finite differences of the loss with `r` and the enclosing-box
/// denominator frozen at the base point, matching the detach semantics of the
/// analytic gradient.
pub fn finite_diff_grad(pred: &BBox, gt: &BBox, state: &mut WIoUState, h: f64) -> [f64; 4] {
    let base = wiou_v3_terms(pred, gt, state);
    let frozen = |p: &BBox| -> f64 {
        let (d2, _) = distance_terms(p, gt);
        let rw = if base.denom == 0.0 { 1.0 } else { (d2 / base.denom).exp() };
        base.r * rw * l_iou(p, gt)
    };
    let mut g = [0.0f64; 4];
    for i in 0..4 {
        let mut lo = *pred;
        let mut hi = *pred;
        match i {
            0 => {
                lo.x1 -= h;
                hi.x1 += h;
            }
            1 => {
                lo.y1 -= h;
                hi.y1 += h;
            }
            2 => {
                lo.x2 -= h;
                hi.x2 += h;
            }
            _ => {
                lo.y2 -= h;
                hi.y2 += h;
            }
        }
        g[i] = (frozen(&hi) - frozen(&lo)) / (2.0 * h);
    }
    g
}

/// Runs `trials` randomized analytic-vs-finite-difference comparisons,
/// rejecting kink pairs, and reports the worst relative error.
pub fn gradient_check(trials: usize, seed: u64, h: f64) -> GradCheckReport {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = WIoUState::default_params();
    // warm the running mean so beta varies across trials
    state.beta(0.5);

    let mut report = GradCheckReport { trials, evaluated: 0, skipped_kinks: 0, max_rel_err: 0.0 };
    let mut done = 0;
    while done < trials {
        let pred = random_box(&mut rng, 20.0);
        let gt = random_box(&mut rng, 20.0);
        done += 1;
        if is_kink_pair(&pred, &gt, 1e-3) {
            report.skipped_kinks += 1;
            continue;
        }
        let ga = grad_wiou_v3(&pred, &gt, &mut state);
        let gf = finite_diff_grad(&pred, &gt, &mut state, h);
        let scale = gf.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = ga
            .iter()
            .zip(&gf)
            .map(|(a, f)| (a - f).abs())
            .fold(0.0f64, f64::max)
            / scale;
        report.max_rel_err = report.max_rel_err.max(err);
        report.evaluated += 1;
        // drift the mean so later trials see different beta
        state.update_mean(l_iou(&pred, &gt));
    }
    report
}

/// Gradient-descent box fitting with backtracking line search. Returns the
/// IoU against `gt` after at most `max_steps` steps.
pub fn fit_box(start: &BBox, gt: &BBox, max_steps: usize) -> (BBox, f64, usize) {
    let mut state = WIoUState::default_params();
    let mut p = *start;
    for step in 0..max_steps {
        if iou(&p, gt) > 0.99 {
            return (p, iou(&p, gt), step);
        }
        let g = grad_wiou_v3(&p, gt, &mut state);
        let loss0 = wiou_v3_terms(&p, gt, &mut state).loss;
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        // backtracking line search on the loss
        let mut lr = 4.0 / gnorm.max(1e-6);
        let mut moved = false;
        for _ in 0..30 {
            let cand = BBox {
                x1: p.x1 - lr * g[0],
                y1: p.y1 - lr * g[1],
                x2: p.x2 - lr * g[2],
                y2: p.y2 - lr * g[3],
            };
            if cand.x2 > cand.x1 && cand.y2 > cand.y1 {
                let loss1 = wiou_v3_terms(&cand, gt, &mut state).loss;
                if loss1 < loss0 {
                    p = cand;
                    moved = true;
                    break;
                }
            }
            lr *= 0.5;
        }
        if !moved {
            break;
        }
        let l = l_iou(&p, gt);
        state.beta(l);
        state.update_mean(l);
    }
    (p, iou(&p, gt), max_steps)
}
