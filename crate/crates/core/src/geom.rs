//! Planar primitives shared by the plan model, the losses and post-processing.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Axis-aligned box given by its corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    /// Closed-box containment.
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        overlap_len(self.x0, self.x1, other.x0, other.x1)
            * overlap_len(self.y0, self.y1, other.y0, other.y1)
    }

    /// Euclidean distance from a point to the closed box (zero inside).
    pub fn distance_to(&self, p: Point) -> f64 {
        let dx = (self.x0 - p[0]).max(p[0] - self.x1).max(0.0);
        let dy = (self.y0 - p[1]).max(p[1] - self.y1).max(0.0);
        dx.hypot(dy)
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            [self.x0, self.y0],
            [self.x0, self.y1],
            [self.x1, self.y1],
            [self.x1, self.y0],
        ]
    }
}

/// Length of the intersection of two closed intervals, zero when disjoint.
pub fn overlap_len(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Distance separating two intervals along one axis, zero when they overlap.
pub fn axis_gap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a0.max(b0) - a1.min(b1)).max(0.0)
}

pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    acc / 2.0
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn perimeter(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| dist(poly[i], poly[(i + 1) % n])).sum()
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn bounding_rect(poly: &[Point]) -> Option<Rect> {
    let first = poly.first()?;
    let mut r = Rect::new(first[0], first[1], first[0], first[1]);
    for p in &poly[1..] {
        r.x0 = r.x0.min(p[0]);
        r.y0 = r.y0.min(p[1]);
        r.x1 = r.x1.max(p[0]);
        r.y1 = r.y1.max(p[1]);
    }
    Some(r)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

/// Checks that a closed polygon has no zero-length edges, no fold-backs and
/// no intersections between non-adjacent edges.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if dist(a, b) == 0.0 {
            return false;
        }
        // Consecutive collinear edges must keep their direction.
        let c = poly[(i + 2) % n];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let bc = [c[0] - b[0], c[1] - b[1]];
        if cross(a, b, c) == 0.0 && ab[0] * bc[0] + ab[1] * bc[1] < 0.0 {
            return false;
        }
    }
    if n == 3 {
        return area(poly) > 0.0;
    }
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    area(poly) > 0.0
}

/// Even-odd point-in-polygon test; points on an edge count as inside.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if cross(a, b, p).abs() < 1e-9 && on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Whether the closed rectangle lies inside the polygon: all corners inside and
/// no polygon vertex strictly inside the rectangle's interior.
pub fn rect_inside_polygon(r: &Rect, poly: &[Point]) -> bool {
    if !r.corners().iter().all(|&c| point_in_polygon(c, poly)) {
        return false;
    }
    if !point_in_polygon(r.center(), poly) {
        return false;
    }
    !poly
        .iter()
        .any(|p| p[0] > r.x0 && p[0] < r.x1 && p[1] > r.y0 && p[1] < r.y1)
}

/// Outline of the union of axis-aligned rectangles as a counter-clockwise
/// corner list (in a y-up frame). Returns `None` when the union is empty or
/// splits into several pieces.
pub fn rect_union_outline(rects: &[Rect]) -> Option<Vec<Point>> {
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x0, r.x1]).collect();
    let mut ys: Vec<f64> = rects.iter().flat_map(|r| [r.y0, r.y1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    if xs.len() < 2 || ys.len() < 2 {
        return None;
    }
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    let covered = |i: isize, j: isize| -> bool {
        if i < 0 || j < 0 || i as usize >= nx || j as usize >= ny {
            return false;
        }
        let c = [
            (xs[i as usize] + xs[i as usize + 1]) / 2.0,
            (ys[j as usize] + ys[j as usize + 1]) / 2.0,
        ];
        rects
            .iter()
            .any(|r| c[0] > r.x0 && c[0] < r.x1 && c[1] > r.y0 && c[1] < r.y1)
    };

    // Directed boundary edges on grid vertices, interior kept on the left.
    let mut edges: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            if !covered(i, j) {
                continue;
            }
            let (iu, ju) = (i as usize, j as usize);
            if !covered(i, j - 1) {
                edges.push(((iu, ju), (iu + 1, ju)));
            }
            if !covered(i + 1, j) {
                edges.push(((iu + 1, ju), (iu + 1, ju + 1)));
            }
            if !covered(i, j + 1) {
                edges.push(((iu + 1, ju + 1), (iu, ju + 1)));
            }
            if !covered(i - 1, j) {
                edges.push(((iu, ju + 1), (iu, ju)));
            }
        }
    }
    if edges.is_empty() {
        return None;
    }
    let total = edges.len();
    let mut used = vec![false; total];
    let mut loop_pts = vec![edges[0].0];
    used[0] = true;
    let mut cur = edges[0].1;
    let start = edges[0].0;
    let mut walked = 1;
    while cur != start {
        let next = (0..total).find(|&k| !used[k] && edges[k].0 == cur)?;
        used[next] = true;
        loop_pts.push(cur);
        cur = edges[next].1;
        walked += 1;
    }
    if walked != total {
        return None;
    }
    // Drop collinear vertices.
    let n = loop_pts.len();
    let mut out = Vec::new();
    for k in 0..n {
        let prev = loop_pts[(k + n - 1) % n];
        let here = loop_pts[k];
        let next = loop_pts[(k + 1) % n];
        let straight = (prev.0 == here.0 && here.0 == next.0) || (prev.1 == here.1 && here.1 == next.1);
        if !straight {
            out.push([xs[here.0], ys[here.1]]);
        }
    }
    Some(out)
}
