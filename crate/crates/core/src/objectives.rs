//! Detection and segmentation losses, and the evaluation metrics.
//!
//! Boxes are normalized `(cx, cy, w, h)`. Masks are flat row-major maps.

use crate::config::{LossWeights, Mode};
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Guard against division by an exactly-zero area.
const AREA_FLOOR: f64 = 1e-300;
pub const DICE_SMOOTH: f64 = 1.0;

/// Mean absolute difference over the four box components.
pub fn l1_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let d = g.tape.sub(pred, gt)?;
    let a = g.tape.abs(d)?;
    g.tape.mean(a)
}

/// Corner coordinates `(x1, y1, x2, y2)` of a `1×4` box, with negative
/// widths and heights clamped to zero.
fn corners(g: &mut Graph, b: Var) -> Result<[Var; 4]> {
    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let cx = g.tape.slice_cols(b, 0, 1)?;
    let cy = g.tape.slice_cols(b, 1, 1)?;
    let w = g.tape.slice_cols(b, 2, 1)?;
    let h = g.tape.slice_cols(b, 3, 1)?;
    let w = g.tape.maximum(w, zero)?;
    let h = g.tape.maximum(h, zero)?;
    let hw = g.tape.scale(w, 0.5)?;
    let hh = g.tape.scale(h, 0.5)?;
    Ok([
        g.tape.sub(cx, hw)?,
        g.tape.sub(cy, hh)?,
        g.tape.add(cx, hw)?,
        g.tape.add(cy, hh)?,
    ])
}

fn area(g: &mut Graph, c: &[Var; 4]) -> Result<Var> {
    let w = g.tape.sub(c[2], c[0])?;
    let h = g.tape.sub(c[3], c[1])?;
    g.tape.mul(w, h)
}

/// `1 − GIoU`, in `[0, 2]`.
pub fn giou_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let zero = g.constant(Tensor::zeros(&[1, 1]));
    let floor = g.constant(Tensor::full(&[1, 1], AREA_FLOOR));
    let a = corners(g, pred)?;
    let b = corners(g, gt)?;
    let area_a = area(g, &a)?;
    let area_b = area(g, &b)?;
    let ix1 = g.tape.maximum(a[0], b[0])?;
    let iy1 = g.tape.maximum(a[1], b[1])?;
    let ix2 = g.tape.minimum(a[2], b[2])?;
    let iy2 = g.tape.minimum(a[3], b[3])?;
    let iw = g.tape.sub(ix2, ix1)?;
    let iw = g.tape.maximum(iw, zero)?;
    let ih = g.tape.sub(iy2, iy1)?;
    let ih = g.tape.maximum(ih, zero)?;
    let inter = g.tape.mul(iw, ih)?;
    let sum = g.tape.add(area_a, area_b)?;
    let union = g.tape.sub(sum, inter)?;
    let union_safe = g.tape.maximum(union, floor)?;
    let iou = g.tape.div(inter, union_safe)?;
    let cx1 = g.tape.minimum(a[0], b[0])?;
    let cy1 = g.tape.minimum(a[1], b[1])?;
    let cx2 = g.tape.maximum(a[2], b[2])?;
    let cy2 = g.tape.maximum(a[3], b[3])?;
    let enclosing = area(g, &[cx1, cy1, cx2, cy2])?;
    let enclosing_safe = g.tape.maximum(enclosing, floor)?;
    let gap = g.tape.sub(enclosing, union)?;
    let penalty = g.tape.div(gap, enclosing_safe)?;
    let giou = g.tape.sub(iou, penalty)?;
    let loss = g.tape.scale(giou, -1.0)?;
    let loss = g.tape.add_scalar(loss, 1.0)?;
    g.tape.sum(loss)
}

fn check_target(target: &[bool], n: usize, op: &'static str) -> Result<()> {
    if target.len() != n {
        return Err(Error::dim(
            op,
            format!("target has {} pixels, prediction {n}", target.len()),
        ));
    }
    Ok(())
}

/// Mean binary focal loss `−α (1 − p_t)^γ log p_t` on probabilities.
pub fn focal_loss(g: &mut Graph, probs: Var, target: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    let p = g.tape.value(probs);
    check_target(target, p.numel(), "focal_loss")?;
    if p.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::numeric("focal_loss", "probability outside (0, 1)"));
    }
    let shape = p.shape().to_vec();
    let s = Tensor::new(&shape, target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())?;
    let sign = g.constant(s.map(|t| 2.0 * t - 1.0));
    let offset = g.constant(s.map(|t| 1.0 - t));
    let pt = g.tape.mul(probs, sign)?;
    let pt = g.tape.add(pt, offset)?;
    let log_pt = g.tape.log(pt)?;
    focal_terms(g, pt, log_pt, alpha, gamma)
}

/// Focal loss evaluated from logits; equal to [`focal_loss`] on
/// `sigmoid(logits)` but stable when the sigmoid saturates.
pub fn focal_loss_logits(g: &mut Graph, logits: Var, target: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
    let z = g.tape.value(logits);
    check_target(target, z.numel(), "focal_loss")?;
    let sign = g.constant(Tensor::new(
        z.shape(),
        target.iter().map(|&t| if t { 1.0 } else { -1.0 }).collect(),
    )?);
    let zt = g.tape.mul(logits, sign)?;
    let neg = g.tape.scale(zt, -1.0)?;
    let sp = g.tape.softplus(neg)?;
    let log_pt = g.tape.scale(sp, -1.0)?;
    let pt = g.tape.sigmoid(zt)?;
    focal_terms(g, pt, log_pt, alpha, gamma)
}

fn focal_terms(g: &mut Graph, pt: Var, log_pt: Var, alpha: f64, gamma: f64) -> Result<Var> {
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let q = g.tape.scale(pt, -1.0)?;
        let q = g.tape.add_scalar(q, 1.0)?;
        let m = g.tape.powf(q, gamma)?;
        g.tape.mul(m, log_pt)?
    };
    let mean = g.tape.mean(weighted)?;
    g.tape.scale(mean, -alpha)
}

/// `1 − (2 Σ s·ŝ + ε) / (Σ s + Σ ŝ + ε)` with `ε = 1`.
pub fn dice_loss(g: &mut Graph, probs: Var, target: &[bool]) -> Result<Var> {
    let p = g.tape.value(probs);
    check_target(target, p.numel(), "dice_loss")?;
    let s = Tensor::new(p.shape(), target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect())?;
    let s_sum = s.sum();
    let sv = g.constant(s);
    let prod = g.tape.mul(probs, sv)?;
    let inter = g.tape.sum(prod)?;
    let num = g.tape.scale(inter, 2.0)?;
    let num = g.tape.add_scalar(num, DICE_SMOOTH)?;
    let den = g.tape.sum(probs)?;
    let den = g.tape.add_scalar(den, s_sum + DICE_SMOOTH)?;
    let ratio = g.tape.div(num, den)?;
    let neg = g.tape.scale(ratio, -1.0)?;
    g.tape.add_scalar(neg, 1.0)
}

/// Predictions entering the joint loss.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub pred_box: Option<Var>,
    pub gt_box: [f64; 4],
    /// Full-resolution mask logits.
    pub mask_logits: Option<Var>,
    pub gt_mask: &'a [bool],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub dice: f64,
}

/// Detection loss, segmentation loss and their sum; the parts a mode
/// excludes are neither computed nor added.
pub fn total_loss(g: &mut Graph, x: &LossInputs, w: &LossWeights, mode: Mode) -> Result<(Var, LossBreakdown)> {
    let mut out = LossBreakdown::default();
    let mut det = None;
    let mut seg = None;
    if mode.has_box() {
        let pred = x
            .pred_box
            .ok_or_else(|| Error::InvalidArgument("mode needs a box prediction".into()))?;
        let gt = g.constant(Tensor::matrix(1, 4, x.gt_box.to_vec())?);
        let l1 = l1_loss(g, pred, gt)?;
        let gi = giou_loss(g, pred, gt)?;
        out.l1 = g.tape.value(l1).item();
        out.giou = g.tape.value(gi).item();
        let a = g.tape.scale(l1, w.l1)?;
        let b = g.tape.scale(gi, w.giou)?;
        det = Some(g.tape.add(a, b)?);
    }
    if mode.has_mask() {
        let logits = x
            .mask_logits
            .ok_or_else(|| Error::InvalidArgument("mode needs a mask prediction".into()))?;
        let probs = g.tape.sigmoid(logits)?;
        let fo = focal_loss_logits(g, logits, x.gt_mask, w.focal_alpha, w.focal_gamma)?;
        let di = dice_loss(g, probs, x.gt_mask)?;
        out.focal = g.tape.value(fo).item();
        out.dice = g.tape.value(di).item();
        let a = g.tape.scale(fo, w.focal)?;
        let b = g.tape.scale(di, w.dice)?;
        seg = Some(g.tape.add(a, b)?);
    }
    let total = match (det, seg) {
        (Some(d), Some(s)) => g.tape.add(d, s)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => unreachable!("every mode has a loss"),
    };
    out.total = g.tape.value(total).item();
    Ok((total, out))
}

/// IoU of two normalized `(cx, cy, w, h)` boxes; negative sizes count as empty.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let c = |b: &[f64; 4]| {
        let (w, h) = (b[2].max(0.0), b[3].max(0.0));
        [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0]
    };
    let (a, b) = (c(a), c(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Fraction of pairs with IoU strictly above 0.5.
pub fn prec_at_05(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| box_iou(p, g) > 0.5).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("mask_iou", format!("{} vs {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        s += mask_iou(p, g)?;
    }
    Ok(s / pred.len() as f64)
}
