//! Training loss: weighted focal loss on the score map, Wise-IoU (v1) and L1
//! on the box read at the ground-truth center cell.

use crate::autodiff::{Tape, Var};
use crate::bbox::BoundingBox;
use crate::error::{contract, Result};
use crate::head::{center_cell, HeadOutputs, HeadVars};
use crate::tensor::{Scalar, Tensor};

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_CLAMP: f64 = 1e-6;
pub const MIN_OVERLAP: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { iou: 2.0, l1: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

impl LossBreakdown {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.total, self.cls, self.iou, self.l1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub iou: Var,
    pub l1: Var,
    /// Squared enclosing diagonal the Wise-IoU term was scaled by.
    pub wiou_d: f64,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().f64();
        LossBreakdown {
            total: v(self.total),
            cls: v(self.cls),
            iou: v(self.iou),
            l1: v(self.l1),
        }
    }
}

/// Box target normalized by the search side: center and extents in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn from_pixels(b: &BoundingBox, side: f64) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx: cx / side,
            cy: cy / side,
            w: b.w / side,
            h: b.h / side,
        }
    }
}

/// CenterNet radius rule for a box of `h x w` cells.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let m = min_overlap;
    let b1 = h + w;
    let c1 = w * h * (1.0 - m) / (1.0 + m);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - m) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * m;
    let b3 = -2.0 * m * (h + w);
    let c3 = (m - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Gaussian bump at the owning cell of the target center; exactly 1 there.
pub fn gaussian_heatmap<T: Scalar>(gt: &NormBox, s: usize) -> Result<Tensor<T>> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(contract("heatmap target needs positive extents"));
    }
    let (ci, cj) = center_cell(gt.cx, gt.cy, s);
    let sf = s as f64;
    let r = gaussian_radius(gt.h * sf, gt.w * sf, MIN_OVERLAP).floor().max(0.0) as i64;
    let sigma = (2 * r + 1) as f64 / 6.0;
    Tensor::from_fn(&[1, s, s], |idx| {
        let di = (idx / s) as i64 - ci as i64;
        let dj = (idx % s) as i64 - cj as i64;
        if di.abs() > r || dj.abs() > r {
            T::zero()
        } else if di == 0 && dj == 0 {
            T::one()
        } else {
            T::of((-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp())
        }
    })
}

fn scalar<T: Scalar>(tape: &mut Tape<'_, T>, v: f64) -> Var {
    tape.constant(Tensor::scalar(T::of(v)))
}

fn one_minus<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Var {
    let n = tape.scale(x, -T::one());
    tape.add_scalar(n, T::one())
}

/// `-(1/Npos) * sum[ y==1: (1-p)^a log p ; else (1-y)^b p^a log(1-p) ]`.
pub fn focal_loss_graph<T: Scalar>(tape: &mut Tape<'_, T>, score: Var, heatmap: &Tensor<T>) -> Result<Var> {
    if tape.shape(score) != heatmap.shape() {
        return Err(crate::error::Error::Dimension {
            op: "focal loss",
            lhs: tape.shape(score).to_vec(),
            rhs: heatmap.shape().to_vec(),
        });
    }
    let npos = heatmap.data().iter().filter(|&&y| y == T::one()).count();
    if npos == 0 {
        return Err(contract("focal loss needs at least one positive cell"));
    }
    let pos = heatmap.map(|y| if y == T::one() { T::one() } else { T::zero() });
    let neg = heatmap.map(|y| if y == T::one() { T::zero() } else { (T::one() - y).powi(FOCAL_BETA) });
    let eps = T::of(PROB_CLAMP);
    let p = tape.clamp(score, eps, T::one() - eps);
    let q = one_minus(tape, p);
    let log_p = tape.ln(p);
    let log_q = tape.ln(q);
    let q2 = tape.square(q);
    let p2 = tape.square(p);
    let pos_term = tape.mul(q2, log_p)?;
    let neg_term = tape.mul(p2, log_q)?;
    let pos_mask = tape.constant(pos);
    let neg_mask = tape.constant(neg);
    let a = tape.mul(pos_term, pos_mask)?;
    let b = tape.mul(neg_term, neg_mask)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, T::of(-1.0 / npos as f64)))
}

/// Predicted box components as scalar nodes: `[cx, cy, w, h]`.
pub type BoxVars = [Var; 4];

/// Reads the predicted normalized box at grid cell `(i, j)`.
pub fn box_at_cell<T: Scalar>(tape: &mut Tape<'_, T>, h: &HeadVars, i: usize, j: usize) -> Result<BoxVars> {
    let s = tape.shape(h.score)[1];
    let plane = s * s;
    let idx = i * s + j;
    let ox = tape.index(h.offset, idx)?;
    let oy = tape.index(h.offset, plane + idx)?;
    let w = tape.index(h.size, idx)?;
    let hh = tape.index(h.size, plane + idx)?;
    let inv = T::of(1.0 / s as f64);
    let cx = tape.add_scalar(ox, T::of(j as f64));
    let cx = tape.scale(cx, inv);
    let cy = tape.add_scalar(oy, T::of(i as f64));
    let cy = tape.scale(cy, inv);
    Ok([cx, cy, w, hh])
}

fn corners<T: Scalar>(tape: &mut Tape<'_, T>, c: Var, e: Var) -> Result<(Var, Var)> {
    let half = tape.scale(e, T::of(0.5));
    Ok((tape.sub(c, half)?, tape.add(c, half)?))
}

/// Wise-IoU v1, `exp(d^2 / D) * (1 - IoU)` with the enclosing-box diagonal
/// `D` held constant.
pub fn wiou_loss_graph<T: Scalar>(tape: &mut Tape<'_, T>, pred: BoxVars, gt: &NormBox) -> Result<Var> {
    Ok(wiou_loss_graph_with(tape, pred, gt, None)?.0)
}

/// Squared enclosing-box diagonal for the current predicted values.
pub fn enclosing_diag_sq<T: Scalar>(tape: &Tape<'_, T>, pred: BoxVars, gt: &NormBox) -> f64 {
    let v = |x: Var| tape.value(x).item().f64();
    let (cx, cy, w, h) = (v(pred[0]), v(pred[1]), v(pred[2]), v(pred[3]));
    let ew = (cx + w / 2.0).max(gt.cx + gt.w / 2.0) - (cx - w / 2.0).min(gt.cx - gt.w / 2.0);
    let eh = (cy + h / 2.0).max(gt.cy + gt.h / 2.0) - (cy - h / 2.0).min(gt.cy - gt.h / 2.0);
    ew * ew + eh * eh
}

/// As [`wiou_loss_graph`], optionally with `D` supplied by the caller; also
/// returns the `D` used.
pub fn wiou_loss_graph_with<T: Scalar>(tape: &mut Tape<'_, T>, pred: BoxVars, gt: &NormBox, fixed_d: Option<f64>) -> Result<(Var, f64)> {
    let g = [gt.cx, gt.cy, gt.w, gt.h].map(|v| scalar(tape, v));
    let (px1, px2) = corners(tape, pred[0], pred[2])?;
    let (py1, py2) = corners(tape, pred[1], pred[3])?;
    let (gx1, gx2) = corners(tape, g[0], g[2])?;
    let (gy1, gy2) = corners(tape, g[1], g[3])?;

    let ix2 = tape.min(px2, gx2)?;
    let ix1 = tape.max(px1, gx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let iy2 = tape.min(py2, gy2)?;
    let iy1 = tape.max(py1, gy1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let pa = tape.mul(pred[2], pred[3])?;
    let union = tape.add_scalar(pa, T::of(gt.w * gt.h));
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let d = fixed_d.unwrap_or_else(|| enclosing_diag_sq(tape, pred, gt));
    if !(d > 0.0) || !d.is_finite() {
        return Err(contract("wise-IoU: degenerate enclosing box"));
    }
    let dx = tape.sub(pred[0], g[0])?;
    let dy = tape.sub(pred[1], g[1])?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let dist = tape.add(dx2, dy2)?;
    let dist = tape.scale(dist, T::of(1.0 / d));
    let r = tape.exp(dist);
    let gap = one_minus(tape, iou);
    Ok((tape.mul(r, gap)?, d))
}

/// Mean absolute error over `(cx, cy, w, h)`.
pub fn l1_loss_graph<T: Scalar>(tape: &mut Tape<'_, T>, pred: BoxVars, gt: &NormBox) -> Result<Var> {
    let mut acc = None;
    for (p, g) in pred.into_iter().zip([gt.cx, gt.cy, gt.w, gt.h]) {
        let d = tape.add_scalar(p, T::of(-g));
        let a = tape.abs(d);
        acc = Some(match acc {
            None => a,
            Some(s) => tape.add(s, a)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), T::of(0.25)))
}

pub fn total_loss_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: &HeadVars,
    gt: &NormBox,
    heatmap: &Tensor<T>,
    weights: LossWeights,
) -> Result<LossVars> {
    total_loss_graph_with(tape, h, gt, heatmap, weights, None)
}

/// Total loss with an optional externally fixed Wise-IoU `D`, so that
/// finite differences see the same function the tape differentiates.
pub fn total_loss_graph_with<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: &HeadVars,
    gt: &NormBox,
    heatmap: &Tensor<T>,
    weights: LossWeights,
    fixed_d: Option<f64>,
) -> Result<LossVars> {
    let s = tape.shape(h.score)[1];
    let (i, j) = center_cell(gt.cx, gt.cy, s);
    let cls = focal_loss_graph(tape, h.score, heatmap)?;
    let pred = box_at_cell(tape, h, i, j)?;
    let (iou, wiou_d) = wiou_loss_graph_with(tape, pred, gt, fixed_d)?;
    let l1 = l1_loss_graph(tape, pred, gt)?;
    let wi = tape.scale(iou, T::of(weights.iou));
    let wl = tape.scale(l1, T::of(weights.l1));
    let total = tape.add(cls, wi)?;
    let total = tape.add(total, wl)?;
    Ok(LossVars { total, cls, iou, l1, wiou_d })
}

/// Focal loss on materialized maps.
pub fn focal_loss<T: Scalar>(score: &Tensor<T>, heatmap: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(score.clone());
    let l = focal_loss_graph(&mut tape, s, heatmap)?;
    Ok(tape.value(l).item().f64())
}

/// Wise-IoU v1 between two boxes; `gt` supplies the reference center.
pub fn wiou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let mut tape = Tape::<f64>::new();
    let (cx, cy) = pred.center();
    let p = [cx, cy, pred.w, pred.h].map(|v| scalar(&mut tape, v));
    let (gcx, gcy) = gt.center();
    let g = NormBox {
        cx: gcx,
        cy: gcy,
        w: gt.w,
        h: gt.h,
    };
    let l = wiou_loss_graph(&mut tape, p, &g)?;
    Ok(tape.value(l).item())
}

pub fn total_loss<T: Scalar>(h: &HeadOutputs<T>, gt: &NormBox, heatmap: &Tensor<T>, weights: LossWeights) -> Result<LossBreakdown> {
    h.validate()?;
    let mut tape = Tape::new();
    let vars = HeadVars {
        score: tape.constant(h.score.clone()),
        offset: tape.constant(h.offset.clone()),
        size: tape.constant(h.size.clone()),
    };
    let l = total_loss_graph(&mut tape, &vars, gt, heatmap, weights)?;
    Ok(l.breakdown(&tape))
}
