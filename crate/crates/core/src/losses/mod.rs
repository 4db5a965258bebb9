//! Geometry-aware training objective.
//!
//! The scalar functions here operate on plain boxes and serve evaluation and
//! testing; [`tensor`] holds the differentiable batch versions used in
//! training. Both agree on hard (fully present) rooms.

pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::geom::{axis_gap, Point, Rect};
use crate::masking::{masked_mse, ConditionMask};
use crate::plan::{PlanTensor, COL_CX, COL_CY, COL_H, COL_IS_ROOM, COL_W};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gt: f64,
    pub lambda_bound: f64,
    pub lambda_neigh: f64,
    /// Neighbour gap threshold in normalized units.
    pub gap_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gt: 1.0,
            lambda_bound: 0.5,
            lambda_neigh: 0.5,
            gap_threshold: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = [self.lambda_gt, self.lambda_bound, self.lambda_neigh]
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0)
            && self.gap_threshold > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig(
                "loss weights must be >= 0 and the gap threshold > 0".into(),
            ))
        }
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub noise: f64,
    pub gt: f64,
    /// Absent when the boundary condition is disabled.
    pub bound: Option<f64>,
    pub neigh: f64,
}

/// Masked squared error between the clean-sample estimate and the target.
pub fn align_gt_loss(x0_hat: &PlanTensor, x0: &PlanTensor, mask: &ConditionMask) -> f64 {
    masked_mse(x0_hat, x0, mask)
}

/// Zero when the corner lies in (or on) some box, otherwise the distance to
/// the closest box. An empty room list yields zero.
pub fn boundary_corner_distance(corner: Point, rooms: &[Rect]) -> f64 {
    rooms
        .iter()
        .map(|r| r.distance_to(corner))
        .reduce(f64::min)
        .unwrap_or(0.0)
}

/// Mean corner-to-rooms distance over the boundary corners.
pub fn align_bound_loss(rooms: &[Rect], boundary: &[Point]) -> f64 {
    if boundary.is_empty() {
        return 0.0;
    }
    boundary
        .iter()
        .map(|&c| boundary_corner_distance(c, rooms))
        .sum::<f64>()
        / boundary.len() as f64
}

pub fn box_iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Sum of the horizontal and vertical separations, or zero once either
/// separation exceeds `d`.
pub fn box_gap(a: &Rect, b: &Rect, d: f64) -> f64 {
    let gx = axis_gap(a.x0, a.x1, b.x0, b.x1);
    let gy = axis_gap(a.y0, a.y1, b.y0, b.y1);
    if gx > d || gy > d {
        0.0
    } else {
        gx + gy
    }
}

/// Mean of `IoU + Gap` over unordered room pairs.
pub fn align_neigh_loss(rooms: &[Rect], d: f64) -> f64 {
    let n = rooms.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += box_iou(&rooms[i], &rooms[j]) + box_gap(&rooms[i], &rooms[j], d);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// `L_noise + l1 L_gt + l2 L_bound + l3 L_neigh`, the boundary term dropped
/// entirely when absent.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    let mut total = parts.noise + w.lambda_gt * parts.gt + w.lambda_neigh * parts.neigh;
    if let Some(b) = parts.bound {
        total += w.lambda_bound * b;
    }
    total
}

/// Boxes of the present rooms (is-room > 0) in normalized coordinates.
pub fn normalized_rooms(t: &PlanTensor) -> Vec<Rect> {
    t.0.iter()
        .filter(|row| row[COL_IS_ROOM] > 0.0)
        .map(|row| {
            Rect::from_center(
                row[COL_CX],
                row[COL_CY],
                (row[COL_W] + 1.0).max(0.0),
                (row[COL_H] + 1.0).max(0.0),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_mask, Mode};

    fn unit_at(cx: f64, cy: f64) -> Rect {
        Rect::from_center(cx, cy, 1.0, 1.0)
    }

    #[test]
    fn gt_loss_values() {
        let auto = build_mask(Mode::Auto, None).unwrap();
        let x = PlanTensor::filled(0.2);
        assert_eq!(align_gt_loss(&x, &x, &auto), 0.0);
        assert!((align_gt_loss(&x.map(|v| v + 1.0), &x, &auto) - 1.0).abs() < 1e-12);
        let tl = build_mask(Mode::TypesLocations, None).unwrap();
        let mut pinned_residual = x;
        for row in pinned_residual.0.iter_mut() {
            for v in &mut row[..4] {
                *v += 1.0;
            }
        }
        assert_eq!(align_gt_loss(&pinned_residual, &x, &tl), 0.0);
    }

    #[test]
    fn corner_distance_cases() {
        let r = Rect::new(0.5, -0.5, 1.5, 0.5);
        assert_eq!(boundary_corner_distance([1.0, 0.0], &[r]), 0.0);
        assert!((boundary_corner_distance([0.0, 0.0], &[r]) - 0.5).abs() < 1e-15);
        assert_eq!(boundary_corner_distance([0.5, 0.5], &[r]), 0.0);
        assert_eq!(boundary_corner_distance([3.0, 3.0], &[]), 0.0);
        let far = Rect::new(10.0, 10.0, 11.0, 11.0);
        assert!((boundary_corner_distance([0.0, 0.0], &[far, r]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bound_loss_cases() {
        let square = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert_eq!(align_bound_loss(&[Rect::new(0.0, 0.0, 1.0, 1.0)], &square), 0.0);
        let shrunk = Rect::new(0.1, 0.1, 0.9, 0.9);
        let expected = 0.1 * 2f64.sqrt();
        assert!((align_bound_loss(&[shrunk], &square) - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_cases() {
        let a = unit_at(0.0, 0.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &unit_at(5.0, 0.0)), 0.0);
        assert!((box_iou(&a, &unit_at(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gap_cases() {
        let a = unit_at(0.0, 0.0);
        assert_eq!(box_gap(&a, &unit_at(0.5, 0.2), 0.1), 0.0);
        assert!((box_gap(&a, &unit_at(1.05, 0.3), 0.1) - 0.05).abs() < 1e-12);
        assert_eq!(box_gap(&a, &unit_at(1.2, 0.0), 0.1), 0.0);
        // Both axes separated but within threshold: distances add.
        assert!((box_gap(&a, &unit_at(1.05, 1.08), 0.1) - 0.13).abs() < 1e-12);
    }

    #[test]
    fn neigh_loss_cases() {
        let a = unit_at(0.0, 0.0);
        assert_eq!(align_neigh_loss(&[a], 0.1), 0.0);
        assert_eq!(align_neigh_loss(&[a, a], 0.1), 1.0);
        assert_eq!(align_neigh_loss(&[a, unit_at(1.0, 0.0)], 0.1), 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        let parts = LossParts {
            noise: 1.0,
            gt: 1.0,
            bound: Some(1.0),
            neigh: 1.0,
        };
        let zero = LossWeights {
            lambda_gt: 0.0,
            lambda_bound: 0.0,
            lambda_neigh: 0.0,
            ..w
        };
        assert_eq!(total_loss(&parts, &zero), 1.0);
        let ones = LossWeights {
            lambda_gt: 1.0,
            lambda_bound: 1.0,
            lambda_neigh: 1.0,
            ..w
        };
        assert_eq!(total_loss(&parts, &ones), 4.0);
        let heavy_bound = LossWeights {
            lambda_bound: 5.0,
            ..ones
        };
        let no_boundary = LossParts { bound: None, ..parts };
        assert_eq!(total_loss(&no_boundary, &heavy_bound), 3.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            gap_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
