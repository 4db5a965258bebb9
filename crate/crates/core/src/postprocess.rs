//! Room adjacency, box alignment and same-type merging.

use serde::{Deserialize, Serialize};

use crate::geom::{axis_gap, bounding_rect, overlap_len, point_in_polygon, rect_inside_polygon, rect_union_outline, Point, Rect};
use crate::plan::{FloorPlan, Room, RoomType, FRAME_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEdge {
    pub a: usize,
    pub b: usize,
    pub shared_wall_len: f64,
}

/// Undirected room graph; `edges` holds pairs with `a < b` in lexicographic
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    pub nodes: Vec<RoomType>,
    pub edges: Vec<AdjacencyEdge>,
}

impl AdjacencyGraph {
    pub fn new(nodes: Vec<RoomType>) -> Self {
        Self { nodes, edges: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an edge unless it exists already or is a loop.
    pub fn add_edge(&mut self, a: usize, b: usize, shared_wall_len: f64) {
        let (a, b) = (a.min(b), a.max(b));
        if a != b && !self.has_edge(a, b) {
            self.edges.push(AdjacencyEdge { a, b, shared_wall_len });
            self.edges.sort_by_key(|e| (e.a, e.b));
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (a, b) = (a.min(b), a.max(b));
        self.edges.iter().any(|e| e.a == a && e.b == b)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.a == i || e.b == i).count()
    }

    /// Adjacency matrix as booleans.
    pub fn matrix(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        let mut m = vec![vec![false; n]; n];
        for e in &self.edges {
            m[e.a][e.b] = true;
            m[e.b][e.a] = true;
        }
        m
    }
}

/// Rooms are adjacent when they are within `tau` on one axis and overlap
/// with positive length on the other.
pub fn build_adjacency(plan: &FloorPlan, tau: f64) -> AdjacencyGraph {
    let rects: Vec<Rect> = plan.rooms.iter().map(Room::rect).collect();
    let mut g = AdjacencyGraph::new(plan.rooms.iter().map(|r| r.room_type).collect());
    for i in 0..rects.len() {
        for j in (i + 1)..rects.len() {
            let (a, b) = (&rects[i], &rects[j]);
            let gx = axis_gap(a.x0, a.x1, b.x0, b.x1);
            let gy = axis_gap(a.y0, a.y1, b.y0, b.y1);
            let ox = overlap_len(a.x0, a.x1, b.x0, b.x1);
            let oy = overlap_len(a.y0, a.y1, b.y0, b.y1);
            let side = gx <= tau && oy > 0.0;
            let stacked = gy <= tau && ox > 0.0;
            if side || stacked {
                let wall = match (side, stacked) {
                    (true, true) => ox.max(oy),
                    (true, false) => oy,
                    _ => ox,
                };
                g.edges.push(AdjacencyEdge { a: i, b: j, shared_wall_len: wall });
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    pub snap_eps: f64,
    pub tau: f64,
    pub wall_min: f64,
    pub max_passes: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            snap_eps: 6.0,
            tau: 4.0,
            wall_min: 40.0,
            max_passes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignReport {
    pub plan: FloorPlan,
    /// Passes run, including the final unchanged one when converged.
    pub passes: usize,
    /// False when the pass limit was hit before a fixpoint.
    pub converged: bool,
    /// Gap measure and uncovered area after each pass.
    pub history: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy)]
struct EdgeRef {
    room: usize,
    high: bool,
}

fn edge_coord(r: &Rect, axis: Axis, high: bool) -> f64 {
    match (axis, high) {
        (Axis::X, false) => r.x0,
        (Axis::X, true) => r.x1,
        (Axis::Y, false) => r.y0,
        (Axis::Y, true) => r.y1,
    }
}

fn set_edge(r: &mut Rect, axis: Axis, high: bool, v: f64) {
    match (axis, high) {
        (Axis::X, false) => r.x0 = v,
        (Axis::X, true) => r.x1 = v,
        (Axis::Y, false) => r.y0 = v,
        (Axis::Y, true) => r.y1 = v,
    }
}

/// Extent of a box along the axis perpendicular to `axis`'s edges.
fn span(r: &Rect, axis: Axis) -> (f64, f64) {
    match axis {
        Axis::X => (r.y0, r.y1),
        Axis::Y => (r.x0, r.x1),
    }
}

/// Boundary segments parallel to the edges moved along `axis`, as
/// `(coordinate, lo, hi)`.
fn boundary_segments(boundary: &[Point], axis: Axis) -> Vec<(f64, f64, f64)> {
    let n = boundary.len();
    (0..n)
        .filter_map(|i| {
            let (p, q) = (boundary[i], boundary[(i + 1) % n]);
            match axis {
                Axis::X if p[0] == q[0] => Some((p[0], p[1].min(q[1]), p[1].max(q[1]))),
                Axis::Y if p[1] == q[1] => Some((p[1], p[0].min(q[0]), p[0].max(q[0]))),
                _ => None,
            }
        })
        .collect()
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Groups facing box edges and boundary segments within `eps` and moves every
/// free edge of a group to one shared coordinate. Fixed coordinates
/// (boundary, frozen rooms) win over the group's lower median.
fn snap_axis(rects: &mut [Rect], frozen: &[bool], boundary: &[Point], axis: Axis, eps: f64) {
    let edges: Vec<EdgeRef> = (0..rects.len())
        .flat_map(|room| [EdgeRef { room, high: false }, EdgeRef { room, high: true }])
        .collect();
    let segs = boundary_segments(boundary, axis);
    let n = edges.len();
    let mut parent: Vec<usize> = (0..n + segs.len()).collect();
    for i in 0..n {
        let (ei, ri) = (edges[i], &rects[edges[i].room]);
        let ci = edge_coord(ri, axis, ei.high);
        let (lo, hi) = span(ri, axis);
        for j in (i + 1)..n {
            let ej = edges[j];
            if ej.room == ei.room || ej.high == ei.high {
                continue;
            }
            let rj = &rects[ej.room];
            let (lo2, hi2) = span(rj, axis);
            if overlap_len(lo, hi, lo2, hi2) > 0.0 && (edge_coord(rj, axis, ej.high) - ci).abs() <= eps {
                union(&mut parent, i, j);
            }
        }
        for (k, &(c, slo, shi)) in segs.iter().enumerate() {
            if overlap_len(lo, hi, slo, shi) > 0.0 && (c - ci).abs() <= eps {
                union(&mut parent, i, n + k);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n + segs.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let before = rects.to_vec();
    for members in groups.values().filter(|m| m.len() > 1) {
        let coord = |m: usize| {
            if m < n {
                edge_coord(&before[edges[m].room], axis, edges[m].high)
            } else {
                segs[m - n].0
            }
        };
        let mut all: Vec<f64> = members.iter().map(|&m| coord(m)).collect();
        all.sort_by(f64::total_cmp);
        let median = all[(all.len() - 1) / 2];
        let mut anchors: Vec<f64> = members
            .iter()
            .filter(|&&m| m >= n || frozen[edges[m].room])
            .map(|&m| coord(m))
            .collect();
        anchors.sort_by(f64::total_cmp);
        let target = anchors
            .iter()
            .copied()
            .min_by(|a, b| (a - median).abs().total_cmp(&(b - median).abs()))
            .unwrap_or(median);
        for &m in members.iter().filter(|&&m| m < n) {
            let e = edges[m];
            if !frozen[e.room] {
                set_edge(&mut rects[e.room], axis, e.high, target);
            }
        }
    }
    for (r, old) in rects.iter_mut().zip(&before) {
        let (lo, hi) = (edge_coord(r, axis, false), edge_coord(r, axis, true));
        if hi - lo < 1.0 {
            set_edge(r, axis, false, edge_coord(old, axis, false));
            set_edge(r, axis, true, edge_coord(old, axis, true));
        }
    }
}

/// Whether `strip` is free interior space that only room `owner` touches.
fn strip_is_free(strip: &Rect, rects: &[Rect], owner: usize, boundary: &[Point]) -> bool {
    if strip.width() <= 0.0 || strip.height() <= 0.0 || !rect_inside_polygon(strip, boundary) {
        return false;
    }
    rects.iter().enumerate().filter(|&(k, _)| k != owner).all(|(_, b)| {
        let ox = overlap_len(strip.x0, strip.x1, b.x0, b.x1);
        let oy = overlap_len(strip.y0, strip.y1, b.y0, b.y1);
        let gx = axis_gap(strip.x0, strip.x1, b.x0, b.x1);
        let gy = axis_gap(strip.y0, strip.y1, b.y0, b.y1);
        let overlaps = ox > 0.0 && oy > 0.0;
        let touches = (ox > 0.0 && gy == 0.0) || (oy > 0.0 && gx == 0.0);
        !overlaps && !touches
    })
}

/// Grows each free box toward boundary coordinates through uncovered strips.
fn expand(rects: &mut [Rect], frozen: &[bool], boundary: &[Point]) {
    let mut xs: Vec<f64> = boundary.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = boundary.iter().map(|p| p[1]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    for i in 0..rects.len() {
        if frozen[i] {
            continue;
        }
        for (axis, high) in [(Axis::X, true), (Axis::X, false), (Axis::Y, true), (Axis::Y, false)] {
            let r = rects[i];
            let cur = edge_coord(&r, axis, high);
            let stops = if axis == Axis::X { &xs } else { &ys };
            let candidates: Vec<f64> = if high {
                stops.iter().copied().filter(|&v| v > cur).collect()
            } else {
                stops.iter().rev().copied().filter(|&v| v < cur).collect()
            };
            let mut best = None;
            for v in candidates {
                let mut strip = r;
                set_edge(&mut strip, axis, !high, cur);
                set_edge(&mut strip, axis, high, v);
                if !strip_is_free(&strip, rects, i, boundary) {
                    break;
                }
                best = Some(v);
            }
            if let Some(v) = best {
                set_edge(&mut rects[i], axis, high, v);
            }
        }
    }
}

fn clamp_to(rects: &mut [Rect], frozen: &[bool], region: &Rect) {
    for (r, _) in rects.iter_mut().zip(frozen).filter(|(_, &f)| !f) {
        let c = Rect::new(
            r.x0.clamp(region.x0, region.x1),
            r.y0.clamp(region.y0, region.y1),
            r.x1.clamp(region.x0, region.x1),
            r.y1.clamp(region.y0, region.y1),
        );
        if c.width() >= 1.0 && c.height() >= 1.0 {
            *r = c;
        }
    }
}

/// Sum over box pairs of the separation of facing edges closer than `eps`,
/// plus the overlap depth of boxes whose interiors intersect.
pub fn gap_measure(rects: &[Rect], eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..rects.len() {
        for j in (i + 1)..rects.len() {
            let (a, b) = (&rects[i], &rects[j]);
            let ox = overlap_len(a.x0, a.x1, b.x0, b.x1);
            let oy = overlap_len(a.y0, a.y1, b.y0, b.y1);
            let gx = axis_gap(a.x0, a.x1, b.x0, b.x1);
            let gy = axis_gap(a.y0, a.y1, b.y0, b.y1);
            if ox > 0.0 && oy > 0.0 {
                total += ox.min(oy);
            } else if oy > 0.0 && gx > 0.0 && gx <= eps {
                total += gx;
            } else if ox > 0.0 && gy > 0.0 && gy <= eps {
                total += gy;
            }
        }
    }
    total
}

/// Area inside `boundary` covered by no box.
pub fn uncovered_area(rects: &[Rect], boundary: &[Point]) -> f64 {
    let mut xs: Vec<f64> = boundary.iter().map(|p| p[0]).chain(rects.iter().flat_map(|r| [r.x0, r.x1])).collect();
    let mut ys: Vec<f64> = boundary.iter().map(|p| p[1]).chain(rects.iter().flat_map(|r| [r.y0, r.y1])).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut total = 0.0;
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let c = [(wx[0] + wx[1]) / 2.0, (wy[0] + wy[1]) / 2.0];
            if point_in_polygon(c, boundary) && !rects.iter().any(|r| r.contains(c)) {
                total += (wx[1] - wx[0]) * (wy[1] - wy[0]);
            }
        }
    }
    total
}

/// Snap-then-expand alignment iterated to a fixpoint. Rooms flagged in
/// `frozen` keep their boxes and act as fixed anchors.
pub fn align_boxes(plan: &FloorPlan, boundary: Option<&[Point]>, cfg: &PostConfig, frozen: &[bool]) -> AlignReport {
    let mut rects: Vec<Rect> = plan.rooms.iter().map(Room::rect).collect();
    let frozen: Vec<bool> = (0..rects.len()).map(|i| frozen.get(i).copied().unwrap_or(false)).collect();
    let boundary = boundary.unwrap_or(&[]);
    let region = bounding_rect(boundary).unwrap_or(Rect::new(0.0, 0.0, FRAME_MAX, FRAME_MAX));
    let measure = |rects: &[Rect]| {
        let uncovered = if boundary.len() >= 3 { uncovered_area(rects, boundary) } else { 0.0 };
        (gap_measure(rects, cfg.snap_eps), uncovered)
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut passes = 0;
    while passes < cfg.max_passes {
        passes += 1;
        let before = rects.clone();
        snap_axis(&mut rects, &frozen, boundary, Axis::X, cfg.snap_eps);
        snap_axis(&mut rects, &frozen, boundary, Axis::Y, cfg.snap_eps);
        if boundary.len() >= 3 {
            expand(&mut rects, &frozen, boundary);
        }
        clamp_to(&mut rects, &frozen, &region);
        history.push(measure(&rects));
        if rects == before {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!(passes, "alignment did not reach a fixpoint");
    }
    let mut out = plan.clone();
    for (room, r) in out.rooms.iter_mut().zip(&rects) {
        if *r != room.rect() {
            *room = Room {
                polygon: None,
                merged_with: None,
                ..Room::from_rect(room.room_type, r)
            };
        }
    }
    AlignReport {
        plan: out,
        passes,
        converged,
        history,
    }
}

/// Merges adjacent same-type rooms sharing more than `wall_min` of wall,
/// longest walls first, each room at most once. Both members keep their boxes
/// and gain the union outline and a link to their partner. Returns the merged
/// pairs.
pub fn merge_same_type(plan: &FloorPlan, graph: &AdjacencyGraph, wall_min: f64) -> (FloorPlan, Vec<(usize, usize)>) {
    let mut out = plan.clone();
    let mut cands: Vec<&AdjacencyEdge> = graph
        .edges
        .iter()
        .filter(|e| {
            e.shared_wall_len > wall_min && e.a < plan.rooms.len() && e.b < plan.rooms.len()
                && plan.rooms[e.a].room_type == plan.rooms[e.b].room_type
        })
        .collect();
    cands.sort_by(|x, y| y.shared_wall_len.total_cmp(&x.shared_wall_len).then((x.a, x.b).cmp(&(y.a, y.b))));
    let mut used = vec![false; plan.rooms.len()];
    let mut merges = Vec::new();
    for e in cands {
        if used[e.a] || used[e.b] {
            continue;
        }
        let (ra, rb) = (plan.rooms[e.a].rect(), plan.rooms[e.b].rect());
        if ra.intersection_area(&rb) > 0.0 {
            continue;
        }
        let Some(outline) = rect_union_outline(&[ra, rb]) else {
            continue;
        };
        out.rooms[e.a].polygon = Some(outline.clone());
        out.rooms[e.a].merged_with = Some(e.b);
        out.rooms[e.b].polygon = Some(outline);
        out.rooms[e.b].merged_with = Some(e.a);
        used[e.a] = true;
        used[e.b] = true;
        merges.push((e.a, e.b));
    }
    (out, merges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostResult {
    pub plan: FloorPlan,
    pub converged: bool,
    pub merges: Vec<(usize, usize)>,
}

/// Alignment against the plan's own boundary, then the optional merge.
pub fn postprocess(plan: &FloorPlan, cfg: &PostConfig, frozen: &[bool], merge: bool) -> PostResult {
    let aligned = align_boxes(plan, plan.boundary.as_deref(), cfg, frozen);
    let (plan, merges) = if merge {
        let g = build_adjacency(&aligned.plan, cfg.tau);
        merge_same_type(&aligned.plan, &g, cfg.wall_min)
    } else {
        (aligned.plan, Vec::new())
    };
    PostResult {
        plan,
        converged: aligned.converged,
        merges,
    }
}
