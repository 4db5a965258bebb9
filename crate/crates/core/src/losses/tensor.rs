//! Differentiable batch losses.
//!
//! Boxes are read from the clean-sample estimate `x0_hat` of shape `(B, 8, 6)`
//! in normalized coordinates. A row's half extent is `relu(w + 1) / 2` and its
//! presence is the soft weight `sigmoid(k * is_room)`.

use candle_core::{DType, Tensor, D};

use crate::error::Result;
use crate::plan::{COL_CX, COL_CY, COL_H, COL_IS_ROOM, COL_W};

/// Distance used for a corner when no room is present, the diagonal of the
/// normalized frame.
pub const MAX_CORNER_DISTANCE: f64 = 2.0 * std::f64::consts::SQRT_2;
/// Smoothing for the Euclidean norm so its gradient stays finite at zero.
pub const NORM_EPS: f64 = 1e-6;
/// Sharpness of the soft presence weight.
pub const PRESENCE_SHARPNESS: f64 = 10.0;

/// Axis-aligned boxes in center/half-extent form, each `(B, N)`.
#[derive(Debug, Clone)]
pub struct SoftBoxes {
    pub cx: Tensor,
    pub cy: Tensor,
    pub hw: Tensor,
    pub hh: Tensor,
    /// Presence weights in `[0, 1]`.
    pub weight: Tensor,
}

fn column(x: &Tensor, c: usize) -> Result<Tensor> {
    Ok(x.narrow(D::Minus1, c, 1)?.squeeze(D::Minus1)?)
}

/// Logistic function in its tanh form, whose derivative stays finite for
/// inputs of any magnitude.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

impl SoftBoxes {
    pub fn from_plan(x0_hat: &Tensor) -> Result<Self> {
        let half = |c| -> Result<Tensor> { Ok(((column(x0_hat, c)? + 1.0)?.relu()? * 0.5)?) };
        Ok(Self {
            cx: column(x0_hat, COL_CX)?,
            cy: column(x0_hat, COL_CY)?,
            hw: half(COL_W)?,
            hh: half(COL_H)?,
            weight: sigmoid(&(column(x0_hat, COL_IS_ROOM)? * PRESENCE_SHARPNESS)?)?,
        })
    }

    /// Boxes from `(B, N, 4)` corner coordinates `[x0, y0, x1, y1]` with the
    /// given `(B, N)` weights.
    pub fn from_corners(boxes: &Tensor, weight: Tensor) -> Result<Self> {
        let x0 = column(boxes, 0)?;
        let y0 = column(boxes, 1)?;
        let x1 = column(boxes, 2)?;
        let y1 = column(boxes, 3)?;
        Ok(Self {
            cx: ((&x0 + &x1)? * 0.5)?,
            cy: ((&y0 + &y1)? * 0.5)?,
            hw: ((x1 - x0)? * 0.5)?,
            hh: ((y1 - y0)? * 0.5)?,
            weight,
        })
    }

    fn extents(&self) -> Result<[Tensor; 4]> {
        Ok([
            (&self.cx - &self.hw)?,
            (&self.cy - &self.hh)?,
            (&self.cx + &self.hw)?,
            (&self.cy + &self.hh)?,
        ])
    }
}

/// Squared error averaged over entries with a nonzero mask, summed over the
/// whole batch. All inputs share one shape.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let sq = ((pred - target)?.sqr()? * mask)?.sum_all()?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok((sq / count.max(1.0))?)
}

/// Mean over enabled samples of the mean over corners of the soft distance
/// from each corner to the nearest present room.
///
/// `corners` is `(B, M, 2)`, `enabled` is `(B,)` holding 0 or 1.
pub fn align_bound(boxes: &SoftBoxes, corners: &Tensor, enabled: &Tensor) -> Result<Tensor> {
    let px = column(corners, 0)?.unsqueeze(2)?;
    let py = column(corners, 1)?.unsqueeze(2)?;
    let cx = boxes.cx.unsqueeze(1)?;
    let cy = boxes.cy.unsqueeze(1)?;
    let hw = boxes.hw.unsqueeze(1)?;
    let hh = boxes.hh.unsqueeze(1)?;
    let dx = px.broadcast_sub(&cx)?.abs()?.broadcast_sub(&hw)?.relu()?;
    let dy = py.broadcast_sub(&cy)?.abs()?.broadcast_sub(&hh)?.relu()?;
    let dist = ((dx.sqr()? + dy.sqr()?)? + NORM_EPS * NORM_EPS)?
        .sqrt()?
        .affine(1.0, -NORM_EPS)?;
    let s = boxes.weight.unsqueeze(1)?;
    let absent = s.affine(-1.0, 1.0)?;
    let eff = (dist.broadcast_mul(&s)? + absent.affine(MAX_CORNER_DISTANCE, 0.0)?.broadcast_as(dist.shape())?)?;
    let per_corner = eff.min(D::Minus1)?;
    let per_sample = per_corner.mean(D::Minus1)?;
    let n_enabled = enabled.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((per_sample * enabled)?.sum_all()? / n_enabled.max(1.0))?)
}

/// Mean over samples of the weighted mean over room pairs of `IoU + Gap`.
///
/// The gap threshold gate is evaluated on detached values and carries no
/// gradient.
pub fn align_neigh(boxes: &SoftBoxes, d: f64) -> Result<Tensor> {
    let [x0, y0, x1, y1] = boxes.extents()?;
    let (b, n) = boxes.cx.dims2()?;
    let row = |t: &Tensor| t.unsqueeze(2);
    let col = |t: &Tensor| t.unsqueeze(1);

    let lo_x = row(&x0)?.broadcast_maximum(&col(&x0)?)?;
    let hi_x = row(&x1)?.broadcast_minimum(&col(&x1)?)?;
    let lo_y = row(&y0)?.broadcast_maximum(&col(&y0)?)?;
    let hi_y = row(&y1)?.broadcast_minimum(&col(&y1)?)?;
    let ix = (&hi_x - &lo_x)?.relu()?;
    let iy = (&hi_y - &lo_y)?.relu()?;
    let inter = (ix * iy)?;
    let area = ((&boxes.hw * &boxes.hh)? * 4.0)?;
    let union = row(&area)?.broadcast_add(&col(&area)?)?.sub(&inter)?;
    let iou = (&inter / (union + 1e-12)?)?;

    let gx = (&lo_x - &hi_x)?.relu()?;
    let gy = (&lo_y - &hi_y)?.relu()?;
    let gate = (gx.detach().le(d)?.to_dtype(gx.dtype())? * gy.detach().le(d)?.to_dtype(gx.dtype())?)?;
    let gap = ((gx + gy)? * gate)?;

    let upper = Tensor::triu2(n, gap.dtype(), gap.device())?;
    let diag = Tensor::eye(n, gap.dtype(), gap.device())?;
    let strict = (upper - diag)?.unsqueeze(0)?.broadcast_as((b, n, n))?;
    let pair_w = (row(&boxes.weight)?.broadcast_mul(&col(&boxes.weight)?)? * strict)?;
    let num = ((iou + gap)? * &pair_w)?.sum((1, 2))?;
    let den = (pair_w.sum((1, 2))? + 1e-12)?;
    Ok((num / den)?.mean_all()?)
}
