//! Detection losses on matched (prediction, ground truth) pairs.
//!
//! Boxes are `(cx, cy, w, h)` in normalized image coordinates. Each loss has
//! a plain scalar form and a tape op with a hand-derived gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box needs finite coordinates and positive size, got ({cx}, {cy}, {w}, {h})"
            )));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    fn from_array(a: &[f64]) -> BBox {
        BBox {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // corner arithmetic loses the last bits of w and h
    if a == b {
        return 1.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_iou: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VflParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for VflParams {
    fn default() -> Self {
        VflParams {
            alpha: 0.75,
            gamma: 2.0,
        }
    }
}

/// Focaler interval `[d, u]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalerParams {
    pub d: f64,
    pub u: f64,
}

impl Default for FocalerParams {
    fn default() -> Self {
        FocalerParams { d: 0.0, u: 0.95 }
    }
}

impl FocalerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.d && self.d < self.u && self.u <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "focaler interval needs 0 ≤ d < u ≤ 1, got d={} u={}",
                self.d, self.u
            )));
        }
        Ok(())
    }
}

fn clamped_ln(x: f64) -> (f64, bool) {
    if x >= LOG_CLAMP {
        (x.ln(), true)
    } else {
        (LOG_CLAMP.ln(), false)
    }
}

/// Unnormalized per-element varifocal loss and its derivative with respect
/// to the logit.
pub fn varifocal_element(logit: f64, q: f64, positive: bool, vfl: VflParams) -> (f64, f64) {
    let p = sigmoid(logit);
    let (lp, lp_live) = clamped_ln(p);
    let (lq, lq_live) = clamped_ln(1.0 - p);
    // d ln p / dz = 1 - p,  d ln(1-p) / dz = -p
    let dlp = if lp_live { 1.0 - p } else { 0.0 };
    let dlq = if lq_live { -p } else { 0.0 };
    if positive {
        let loss = -q * (q * lp + (1.0 - q) * lq);
        let grad = -q * (q * dlp + (1.0 - q) * dlq);
        (loss, grad)
    } else {
        let pg = p.powf(vfl.gamma);
        let loss = -vfl.alpha * pg * lq;
        let grad = -vfl.alpha * (vfl.gamma * pg * (1.0 - p) * lq + pg * dlq);
        (loss, grad)
    }
}

/// Sum of per-element losses divided by `max(1, #positives)`.
pub fn varifocal_loss(
    logits: &[f64],
    targets: &[f64],
    positive: &[bool],
    vfl: VflParams,
) -> Result<f64> {
    check_vfl_lengths(logits.len(), targets, positive)?;
    let norm = positive.iter().filter(|p| **p).count().max(1) as f64;
    Ok(logits
        .iter()
        .zip(targets)
        .zip(positive)
        .map(|((&z, &q), &pos)| varifocal_element(z, q, pos, vfl).0)
        .sum::<f64>()
        / norm)
}

fn check_vfl_lengths(n: usize, targets: &[f64], positive: &[bool]) -> Result<()> {
    if targets.len() != n || positive.len() != n {
        return Err(Error::InvalidArgument(format!(
            "varifocal inputs disagree in length: {n} logits, {} targets, {} flags",
            targets.len(),
            positive.len()
        )));
    }
    Ok(())
}

pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Focaler-EIoU loss of one pair and its gradient with respect to the
/// predicted `(cx, cy, w, h)`.
pub fn focaler_eiou_with_grad(pred: &[f64; 4], gt: &[f64; 4], f: FocalerParams) -> (f64, [f64; 4]) {
    let [pcx, pcy, pw, ph] = *pred;
    let [gcx, gcy, gw, gh] = *gt;

    // Per-axis overlap and enclosing extents, with derivatives with respect
    // to the predicted low and high edges.
    struct Axis {
        overlap: f64,
        d_overlap: (f64, f64),
        enclose: f64,
        d_enclose: (f64, f64),
    }
    let axis = |c: f64, s: f64, gc: f64, gs: f64| {
        let (lo, hi, glo, ghi) = (c - s / 2.0, c + s / 2.0, gc - gs / 2.0, gc + gs / 2.0);
        let raw = hi.min(ghi) - lo.max(glo);
        let (overlap, d_overlap) = if raw > 0.0 {
            (
                raw,
                (
                    if lo > glo { -1.0 } else { 0.0 },
                    if hi < ghi { 1.0 } else { 0.0 },
                ),
            )
        } else {
            (0.0, (0.0, 0.0))
        };
        let enclose = hi.max(ghi) - lo.min(glo);
        let d_enclose = (
            if lo < glo { -1.0 } else { 0.0 },
            if hi > ghi { 1.0 } else { 0.0 },
        );
        Axis {
            overlap,
            d_overlap,
            enclose,
            d_enclose,
        }
    };
    // (d/dlo, d/dhi) → (d/dc, d/ds)
    let to_center_size = |(dlo, dhi): (f64, f64)| (dlo + dhi, (dhi - dlo) / 2.0);

    let ax = axis(pcx, pw, gcx, gw);
    let ay = axis(pcy, ph, gcy, gh);
    let (dix_c, dix_s) = to_center_size(ax.d_overlap);
    let (diy_c, diy_s) = to_center_size(ay.d_overlap);
    let (dcw_c, dcw_s) = to_center_size(ax.d_enclose);
    let (dch_c, dch_s) = to_center_size(ay.d_enclose);

    let inter = ax.overlap * ay.overlap;
    let union = pw * ph + gw * gh - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    // ∂iou/∂inter and ∂iou/∂(pred area)
    let (di_inter, di_area) = if union > 0.0 {
        ((union + inter) / (union * union), -inter / (union * union))
    } else {
        (0.0, 0.0)
    };
    let d_inter = [
        dix_c * ay.overlap,
        diy_c * ax.overlap,
        dix_s * ay.overlap,
        diy_s * ax.overlap,
    ];
    let d_area = [0.0, 0.0, ph, pw];
    let mut d_iou = [0.0; 4];
    for k in 0..4 {
        d_iou[k] = di_inter * d_inter[k] + di_area * d_area[k];
    }

    let span = f.u - f.d;
    let t = (iou - f.d) / span;
    let (focal, d_focal) = if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t, 1.0 / span)
    };

    let mut loss = 1.0 - focal;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -d_focal * d_iou[k];
    }

    let (cw, ch) = (ax.enclose, ay.enclose);
    let d_cw = [dcw_c, 0.0, dcw_s, 0.0];
    let d_ch = [0.0, dch_c, 0.0, dch_s];

    let c2 = cw * cw + ch * ch;
    if c2 > 0.0 {
        let (dx, dy) = (pcx - gcx, pcy - gcy);
        let rho2 = dx * dx + dy * dy;
        loss += rho2 / c2;
        let d_rho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];
        for k in 0..4 {
            let d_c2 = 2.0 * cw * d_cw[k] + 2.0 * ch * d_ch[k];
            grad[k] += d_rho2[k] / c2 - rho2 * d_c2 / (c2 * c2);
        }
    }
    if cw > 0.0 {
        let dw = pw - gw;
        loss += dw * dw / (cw * cw);
        for k in 0..4 {
            let direct = if k == 2 { 2.0 * dw / (cw * cw) } else { 0.0 };
            grad[k] += direct - 2.0 * dw * dw / (cw * cw * cw) * d_cw[k];
        }
    }
    if ch > 0.0 {
        let dh = ph - gh;
        loss += dh * dh / (ch * ch);
        for k in 0..4 {
            let direct = if k == 3 { 2.0 * dh / (ch * ch) } else { 0.0 };
            grad[k] += direct - 2.0 * dh * dh / (ch * ch * ch) * d_ch[k];
        }
    }
    (loss, grad)
}

pub fn focaler_eiou_loss(pred: &BBox, gt: &BBox, d: f64, u: f64) -> f64 {
    focaler_eiou_with_grad(&pred.to_array(), &gt.to_array(), FocalerParams { d, u }).0
}

pub fn total_loss(cls: f64, l1: f64, geo: f64, w: LossWeights) -> f64 {
    w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_iou * geo
}

fn box_rows(tape: &Tape, pred: Var, gts: &[BBox], what: &str) -> Result<usize> {
    match tape.shape(pred) {
        &[p, 4] if p == gts.len() => Ok(p),
        s => Err(Error::Shape(format!(
            "{what} expects predictions [{},4], got {s:?}",
            gts.len()
        ))),
    }
}

impl Tape {
    /// Varifocal loss over `logits` (any shape, flattened), normalized by
    /// the number of positives.
    pub fn varifocal(
        &mut self,
        logits: Var,
        targets: &[f64],
        positive: &[bool],
        vfl: VflParams,
    ) -> Result<Var> {
        let z = self.value(logits).data().to_vec();
        check_vfl_lengths(z.len(), targets, positive)?;
        let norm = positive.iter().filter(|p| **p).count().max(1) as f64;
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(z.len());
        for ((&zi, &q), &pos) in z.iter().zip(targets).zip(positive) {
            let (l, g) = varifocal_element(zi, q, pos, vfl);
            loss += l;
            dz.push(g / norm);
        }
        let shape = self.shape(logits).to_vec();
        let dz = Tensor::new(shape, dz)?;
        Ok(self.push_op(
            "varifocal",
            &[logits],
            Tensor::scalar(loss / norm),
            Box::new(move |args| vec![Some(dz.scale(args.grad.item()))]),
        ))
    }

    /// Sum over pairs of the L1 distance between predicted rows `[P,4]` and
    /// ground-truth boxes.
    pub fn l1_boxes(&mut self, pred: Var, gts: &[BBox]) -> Result<Var> {
        let p = box_rows(self, pred, gts, "l1 loss")?;
        let target: Vec<f64> = gts.iter().flat_map(|b| b.to_array()).collect();
        let target = Tensor::new(vec![p, 4], target)?;
        let diff = self.value(pred).sub(&target)?;
        let loss = diff.data().iter().map(|d| d.abs()).sum::<f64>();
        let sign = diff.map(|d| {
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(self.push_op(
            "l1_boxes",
            &[pred],
            Tensor::scalar(loss),
            Box::new(move |args| vec![Some(sign.scale(args.grad.item()))]),
        ))
    }

    /// Sum over pairs of the Focaler-EIoU loss of predicted rows `[P,4]`.
    pub fn focaler_eiou(&mut self, pred: Var, gts: &[BBox], f: FocalerParams) -> Result<Var> {
        f.validate()?;
        let p = box_rows(self, pred, gts, "focaler-EIoU loss")?;
        let rows = self.value(pred).data().to_vec();
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(4 * p);
        for (row, gt) in rows.chunks_exact(4).zip(gts) {
            let pb = BBox::from_array(row);
            let (l, g) = focaler_eiou_with_grad(&pb.to_array(), &gt.to_array(), f);
            loss += l;
            grad.extend_from_slice(&g);
        }
        let grad = Tensor::new(vec![p, 4], grad)?;
        Ok(self.push_op(
            "focaler_eiou",
            &[pred],
            Tensor::scalar(loss),
            Box::new(move |args| vec![Some(grad.scale(args.grad.item()))]),
        ))
    }

    /// `λ_cls·cls + λ_l1·l1 + λ_iou·geo` on scalar vars.
    pub fn total_loss(&mut self, cls: Var, l1: Var, geo: Var, w: LossWeights) -> Result<Var> {
        let a = self.scale(cls, w.lambda_cls);
        let b = self.scale(l1, w.lambda_l1);
        let c = self.scale(geo, w.lambda_iou);
        self.add_n(&[a, b, c])
    }
}
