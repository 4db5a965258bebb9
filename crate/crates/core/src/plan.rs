//! Vector floor plan types and their conversion to the fixed-size normalized
//! matrices consumed by the diffusion engine.
//!
//! A plan is encoded as an 8×6 matrix with one row per room slot holding
//! `[is-room, type, cx, cy, w, h]`. The exterior boundary is padded to 40
//! corners and, together with the 4-corner entrance, flattened into an 88-wide
//! condition row that is conceptually replicated across all 8 room slots.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point, Rect};

pub const MAX_ROOMS: usize = 8;
pub const PLAN_COLS: usize = 6;
pub const MAX_CORNERS: usize = 40;
pub const ENTRANCE_CORNERS: usize = 4;
pub const BOUNDARY_WIDTH: usize = 2 * MAX_CORNERS;
pub const ENTRANCE_WIDTH: usize = 2 * ENTRANCE_CORNERS;
pub const CONDITION_WIDTH: usize = BOUNDARY_WIDTH + ENTRANCE_WIDTH;
/// Largest pixel coordinate of the source frame.
pub const FRAME_MAX: f64 = 255.0;

pub const COL_IS_ROOM: usize = 0;
pub const COL_TYPE: usize = 1;
pub const COL_CX: usize = 2;
pub const COL_CY: usize = 3;
pub const COL_W: usize = 4;
pub const COL_H: usize = 5;

/// Decoded geometry snaps to this pixel grid.
const DECODE_GRID: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RoomType {
    Living = 1,
    Bedroom = 2,
    Kitchen = 3,
    Bathroom = 4,
    Balcony = 5,
    Storage = 6,
}

impl RoomType {
    pub const ALL: [RoomType; 6] = [
        RoomType::Living,
        RoomType::Bedroom,
        RoomType::Kitchen,
        RoomType::Bathroom,
        RoomType::Balcony,
        RoomType::Storage,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            RoomType::Living => "living",
            RoomType::Bedroom => "bedroom",
            RoomType::Kitchen => "kitchen",
            RoomType::Bathroom => "bathroom",
            RoomType::Balcony => "balcony",
            RoomType::Storage => "storage",
        }
    }
}

impl TryFrom<u8> for RoomType {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        RoomType::ALL
            .get((v as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| format!("room type {v} not in 1..=6"))
    }
}

impl From<RoomType> for u8 {
    fn from(t: RoomType) -> u8 {
        t.id()
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed axis-aligned room box in source pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    #[serde(rename = "type")]
    pub room_type: RoomType,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Rectilinear outline when this room was merged with a neighbour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<Point>>,
    /// Index of the room this one was merged with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_with: Option<usize>,
}

impl Room {
    pub fn new(room_type: RoomType, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            room_type,
            cx,
            cy,
            w,
            h,
            polygon: None,
            merged_with: None,
        }
    }

    pub fn from_rect(room_type: RoomType, r: &Rect) -> Self {
        let [cx, cy] = r.center();
        Self::new(room_type, cx, cy, r.width(), r.height())
    }

    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Same type and box, ignoring merge annotations.
    pub fn same_box(&self, other: &Room) -> bool {
        self.room_type == other.room_type
            && self.cx == other.cx
            && self.cy == other.cy
            && self.w == other.w
            && self.h == other.h
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPlan("non-finite room geometry".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidPlan(format!(
                "{} has non-positive size {}x{}",
                self.room_type, self.w, self.h
            )));
        }
        let r = self.rect();
        let tol = 1e-9;
        if r.x0 < -tol || r.y0 < -tol || r.x1 > FRAME_MAX + tol || r.y1 > FRAME_MAX + tol {
            return Err(Error::InvalidPlan(format!(
                "{} box [{}, {}]x[{}, {}] leaves the frame",
                self.room_type, r.x0, r.x1, r.y0, r.y1
            )));
        }
        Ok(())
    }
}

/// Validation knobs for [`FloorPlan::validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanRules {
    pub max_rooms: usize,
    /// Dataset convention: exactly one living room whenever rooms exist.
    pub require_single_living: bool,
}

impl Default for PlanRules {
    fn default() -> Self {
        Self {
            max_rooms: MAX_ROOMS,
            require_single_living: true,
        }
    }
}

impl PlanRules {
    /// Geometry-only rules, used for generated output.
    pub fn geometric() -> Self {
        Self {
            require_single_living: false,
            ..Self::default()
        }
    }
}

/// The interchange record: typed rooms plus optional boundary and entrance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    #[serde(default)]
    pub rooms: Vec<Room>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entrance: Option<[Point; ENTRANCE_CORNERS]>,
}

impl FloorPlan {
    pub fn validate(&self, rules: &PlanRules) -> Result<()> {
        if self.rooms.len() > rules.max_rooms {
            return Err(Error::InvalidPlan(format!(
                "{} rooms exceeds the limit of {}",
                self.rooms.len(),
                rules.max_rooms
            )));
        }
        for room in &self.rooms {
            room.validate()?;
        }
        if rules.require_single_living && !self.rooms.is_empty() {
            let living = self
                .rooms
                .iter()
                .filter(|r| r.room_type == RoomType::Living)
                .count();
            if living != 1 {
                return Err(Error::InvalidPlan(format!(
                    "expected exactly one living room, found {living}"
                )));
            }
        }
        if let Some(b) = &self.boundary {
            if b.len() < 3 || b.len() > MAX_CORNERS {
                return Err(Error::InvalidBoundary(format!(
                    "{} corners, expected 3..={MAX_CORNERS}",
                    b.len()
                )));
            }
            if !b.iter().all(|&p| in_frame(p)) {
                return Err(Error::InvalidBoundary("corner outside the frame".into()));
            }
        }
        if let Some(e) = &self.entrance {
            if !e.iter().all(|&p| in_frame(p)) {
                return Err(Error::InvalidBoundary("entrance corner outside the frame".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans always serialize")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn total_area(&self) -> f64 {
        self.rooms.iter().map(Room::area).sum()
    }
}

fn in_frame(p: Point) -> bool {
    p.iter().all(|v| v.is_finite() && (0.0..=FRAME_MAX).contains(v))
}

/// The 8×6 normalized room matrix. Entries lie in [-1, 1] for encoded plans;
/// intermediate diffusion states may leave that range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanTensor(pub [[f64; PLAN_COLS]; MAX_ROOMS]);

impl PlanTensor {
    pub fn zeros() -> Self {
        Self([[0.0; PLAN_COLS]; MAX_ROOMS])
    }

    pub fn filled(v: f64) -> Self {
        Self([[v; PLAN_COLS]; MAX_ROOMS])
    }

    /// All rows padding: every entry encodes zero, i.e. -1.
    pub fn padding() -> Self {
        Self::filled(-1.0)
    }

    pub fn from_flat(values: &[f64]) -> Self {
        assert_eq!(values.len(), MAX_ROOMS * PLAN_COLS, "plan tensor needs 48 values");
        let mut t = Self::zeros();
        for (i, row) in t.0.iter_mut().enumerate() {
            row.copy_from_slice(&values[i * PLAN_COLS..(i + 1) * PLAN_COLS]);
        }
        t
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|r| r.iter().copied())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.flat().collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v = f(*v));
        out
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().flatten().zip(other.flat()) {
            *o = f(*o, b);
        }
        out
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.flat()
            .zip(other.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }
}

impl Default for PlanTensor {
    fn default() -> Self {
        Self::padding()
    }
}

/// Value families of the normalized encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Coordinate,
    Type,
    Flag,
}

impl Domain {
    fn name(self) -> &'static str {
        match self {
            Domain::Coordinate => "coordinate",
            Domain::Type => "type",
            Domain::Flag => "flag",
        }
    }
}

/// Maps a raw value into [-1, 1]: coordinates by `v/127.5 - 1`, types by
/// `v/3 - 1`, flags by `2v - 1`.
pub fn normalize(v: f64, domain: Domain) -> Result<f64> {
    let ok = match domain {
        Domain::Coordinate => (0.0..=FRAME_MAX).contains(&v),
        Domain::Type => (0.0..=6.0).contains(&v) && v.fract() == 0.0,
        Domain::Flag => v == 0.0 || v == 1.0,
    };
    if !ok {
        return Err(Error::OutOfDomain {
            value: v,
            domain: domain.name(),
        });
    }
    Ok(match domain {
        Domain::Coordinate => v / 127.5 - 1.0,
        Domain::Type => v / 3.0 - 1.0,
        Domain::Flag => 2.0 * v - 1.0,
    })
}

/// Inverse of [`normalize`] without range checks or rounding.
pub fn denormalize(v: f64, domain: Domain) -> f64 {
    match domain {
        Domain::Coordinate => (v + 1.0) * 127.5,
        Domain::Type => (v + 1.0) * 3.0,
        Domain::Flag => (v + 1.0) / 2.0,
    }
}

/// Canonical slot order: the living room first, then descending area, ties
/// broken by `(cx, cy)`.
pub fn canonical_order(rooms: &[Room]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rooms.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&rooms[a], &rooms[b]);
        let la = ra.room_type != RoomType::Living;
        let lb = rb.room_type != RoomType::Living;
        la.cmp(&lb)
            .then_with(|| rb.area().total_cmp(&ra.area()))
            .then_with(|| ra.cx.total_cmp(&rb.cx))
            .then_with(|| ra.cy.total_cmp(&rb.cy))
            .then(Ordering::Equal)
    });
    idx
}

pub fn encode_room(room: &Room) -> Result<[f64; PLAN_COLS]> {
    Ok([
        normalize(1.0, Domain::Flag)?,
        normalize(room.room_type.id() as f64, Domain::Type)?,
        normalize(room.cx, Domain::Coordinate)?,
        normalize(room.cy, Domain::Coordinate)?,
        normalize(room.w, Domain::Coordinate)?,
        normalize(room.h, Domain::Coordinate)?,
    ])
}

/// Encodes rooms into the 8×6 matrix in canonical order; unused rows are padding.
pub fn encode_plan(plan: &FloorPlan) -> Result<PlanTensor> {
    encode_rooms_in_order(&plan.rooms, &canonical_order(&plan.rooms))
}

/// Encodes rooms into consecutive rows following an explicit slot order.
pub fn encode_rooms_in_order(rooms: &[Room], order: &[usize]) -> Result<PlanTensor> {
    if order.len() > MAX_ROOMS {
        return Err(Error::InvalidPlan(format!(
            "{} rooms exceeds the limit of {MAX_ROOMS}",
            order.len()
        )));
    }
    let mut t = PlanTensor::padding();
    for (row, &i) in order.iter().enumerate() {
        t.0[row] = encode_room(&rooms[i])?;
    }
    Ok(t)
}

fn snap(v: f64) -> f64 {
    (v / DECODE_GRID).round() * DECODE_GRID
}

/// Decodes a single row, or `None` for padding.
pub fn decode_row(row: &[f64; PLAN_COLS]) -> Option<Room> {
    let row = row.map(|v| if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) });
    if row[COL_IS_ROOM] <= 0.0 {
        return None;
    }
    let type_id = denormalize(row[COL_TYPE], Domain::Type).round().clamp(1.0, 6.0) as u8;
    let room_type = RoomType::try_from(type_id).expect("clamped into range");
    let min_c = DECODE_GRID;
    let max_c = FRAME_MAX - DECODE_GRID;
    let cx = snap(denormalize(row[COL_CX], Domain::Coordinate)).clamp(min_c, max_c);
    let cy = snap(denormalize(row[COL_CY], Domain::Coordinate)).clamp(min_c, max_c);
    // Sizes are floored at one pixel and capped so the box stays in frame.
    let w_cap = 2.0 * cx.min(FRAME_MAX - cx);
    let h_cap = 2.0 * cy.min(FRAME_MAX - cy);
    let w = snap(denormalize(row[COL_W], Domain::Coordinate)).clamp(1.0, w_cap);
    let h = snap(denormalize(row[COL_H], Domain::Coordinate)).clamp(1.0, h_cap);
    Some(Room::new(room_type, cx, cy, w, h))
}

/// Decodes a matrix into rooms. Entries are clipped to [-1, 1]; a row is a room
/// iff its is-room entry is positive; geometry snaps to a half-pixel grid.
pub fn decode_plan(t: &PlanTensor) -> FloorPlan {
    FloorPlan {
        rooms: t.0.iter().filter_map(decode_row).collect(),
        boundary: None,
        entrance: None,
    }
}

/// Inserts midpoints on the strictly longest edge (lowest index on ties) until
/// the polygon has 40 corners.
pub fn pad_boundary(corners: &[Point]) -> Result<Vec<Point>> {
    pad_boundary_to(corners, MAX_CORNERS)
}

/// [`pad_boundary`] with an explicit target corner count (at most 40).
pub fn pad_boundary_to(corners: &[Point], target: usize) -> Result<Vec<Point>> {
    if corners.len() > MAX_CORNERS {
        return Err(Error::InvalidBoundary(format!(
            "{} corners exceeds the limit of {MAX_CORNERS}",
            corners.len()
        )));
    }
    if corners.len() < 3 {
        return Err(Error::InvalidBoundary(format!(
            "{} corners, need at least 3",
            corners.len()
        )));
    }
    if !geom::is_simple(corners) {
        return Err(Error::InvalidBoundary("polygon is not simple".into()));
    }
    let mut poly = corners.to_vec();
    while poly.len() < target.min(MAX_CORNERS) {
        let n = poly.len();
        let mut best = 0;
        let mut best_len = f64::NEG_INFINITY;
        for i in 0..n {
            let len = geom::dist(poly[i], poly[(i + 1) % n]);
            if len > best_len {
                best_len = len;
                best = i;
            }
        }
        let a = poly[best];
        let b = poly[(best + 1) % n];
        poly.insert(best + 1, [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
    }
    Ok(poly)
}

/// Rotates a corner list so it starts at the lexicographically smallest
/// corner, keeping the winding.
pub fn canonical_start(corners: &[Point]) -> Vec<Point> {
    let Some(start) = (0..corners.len()).min_by(|&a, &b| {
        corners[a][0]
            .total_cmp(&corners[b][0])
            .then(corners[a][1].total_cmp(&corners[b][1]))
    }) else {
        return Vec::new();
    };
    corners[start..]
        .iter()
        .chain(&corners[..start])
        .copied()
        .collect()
}

/// The boundary/entrance condition. Rows of the 8×80 and 8×8 matrices are
/// identical, so a single row of each is stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCondition {
    pub boundary: [f64; BOUNDARY_WIDTH],
    pub entrance: [f64; ENTRANCE_WIDTH],
    pub enabled: bool,
}

impl BoundaryCondition {
    pub fn disabled() -> Self {
        Self {
            boundary: [0.0; BOUNDARY_WIDTH],
            entrance: [0.0; ENTRANCE_WIDTH],
            enabled: false,
        }
    }

    pub fn boundary_matrix(&self) -> [[f64; BOUNDARY_WIDTH]; MAX_ROOMS] {
        [self.boundary; MAX_ROOMS]
    }

    pub fn entrance_matrix(&self) -> [[f64; ENTRANCE_WIDTH]; MAX_ROOMS] {
        [self.entrance; MAX_ROOMS]
    }

    /// Boundary followed by entrance, the per-slot condition input.
    pub fn row(&self) -> [f64; CONDITION_WIDTH] {
        let mut out = [0.0; CONDITION_WIDTH];
        out[..BOUNDARY_WIDTH].copy_from_slice(&self.boundary);
        out[BOUNDARY_WIDTH..].copy_from_slice(&self.entrance);
        out
    }

    /// The 40 boundary corners in normalized coordinates.
    pub fn corners(&self) -> [Point; MAX_CORNERS] {
        std::array::from_fn(|i| [self.boundary[2 * i], self.boundary[2 * i + 1]])
    }
}

/// Builds the condition from a boundary polygon and entrance rectangle. The
/// boundary is rotated to its canonical start and padded to 40 corners.
pub fn encode_condition(
    boundary: Option<&[Point]>,
    entrance: Option<&[Point; ENTRANCE_CORNERS]>,
    enabled: bool,
) -> Result<BoundaryCondition> {
    if !enabled {
        return Ok(BoundaryCondition::disabled());
    }
    let corners = boundary
        .ok_or_else(|| Error::InvalidBoundary("condition enabled without a boundary".into()))?;
    let padded = pad_boundary(&canonical_start(corners))?;
    let mut cond = BoundaryCondition::disabled();
    cond.enabled = true;
    for (i, p) in padded.iter().enumerate() {
        cond.boundary[2 * i] = normalize(p[0], Domain::Coordinate)?;
        cond.boundary[2 * i + 1] = normalize(p[1], Domain::Coordinate)?;
    }
    if let Some(e) = entrance {
        for (i, p) in e.iter().enumerate() {
            cond.entrance[2 * i] = normalize(p[0], Domain::Coordinate)?;
            cond.entrance[2 * i + 1] = normalize(p[1], Domain::Coordinate)?;
        }
    }
    Ok(cond)
}

/// Condition for a plan's own boundary, disabled when absent or not requested.
pub fn plan_condition(plan: &FloorPlan, enabled: bool) -> Result<BoundaryCondition> {
    match (&plan.boundary, enabled) {
        (Some(b), true) => encode_condition(Some(b), plan.entrance.as_ref(), true),
        _ => Ok(BoundaryCondition::disabled()),
    }
}
