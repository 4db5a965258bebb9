//! Request and response bodies.

use floorgen_core::geom::Point;
use floorgen_core::plan::{Room, RoomType, ENTRANCE_CORNERS, MAX_ROOMS};
use floorgen_core::sampler::Constraints;
use floorgen_core::{FloorPlan, Mode};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Upper bound on candidates per request.
pub const MAX_K: usize = 16;

fn default_k() -> usize {
    5
}

fn default_alpha() -> f64 {
    0.1
}

/// A user room. Mode `t` reads only the type, `t_and_l` also the center, and
/// pinned rooms in mode `part` need the full box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    #[serde(rename = "type")]
    pub room_type: RoomType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

impl RoomSpec {
    fn to_room(&self) -> Room {
        Room::new(
            self.room_type,
            self.cx.unwrap_or(0.0),
            self.cy.unwrap_or(0.0),
            self.w.unwrap_or(0.0),
            self.h.unwrap_or(0.0),
        )
    }
}

impl From<&Room> for RoomSpec {
    fn from(r: &Room) -> Self {
        Self {
            room_type: r.room_type,
            cx: Some(r.cx),
            cy: Some(r.cy),
            w: Some(r.w),
            h: Some(r.h),
        }
    }
}

/// Sampling options shared by generate and refine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub noise_inject: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Merge same-type neighbours after alignment.
    #[serde(default)]
    pub merge: bool,
}

impl SampleParams {
    pub fn validate(&self) -> Result<(), ApiError> {
        if self.k == 0 || self.k > MAX_K {
            return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ApiError::bad_request("alpha must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Appends to an existing session instead of creating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entrance: Option<[Point; ENTRANCE_CORNERS]>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rooms: Option<Vec<RoomSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_rooms: Option<Vec<usize>>,
    #[serde(flatten)]
    pub params: SampleParams,
}

impl GenerateRequest {
    /// Checks the mode rules and converts to sampler constraints. Missing
    /// inputs give 400; pinned rooms that are not valid rooms give 422.
    pub fn constraints(&self) -> Result<Constraints, ApiError> {
        self.params.validate()?;
        let specs = self.rooms.clone().unwrap_or_default();
        if specs.len() > MAX_ROOMS {
            return Err(ApiError::bad_request(format!("at most {MAX_ROOMS} rooms")));
        }
        let fixed = self.fixed_rooms.clone().unwrap_or_default();
        match self.mode {
            Mode::Types | Mode::TypesLocations if specs.is_empty() => {
                return Err(ApiError::bad_request(format!("mode {} requires rooms", self.mode)));
            }
            Mode::Partial if self.fixed_rooms.is_none() => {
                return Err(ApiError::bad_request("mode part requires fixed_rooms"));
            }
            Mode::Auto | Mode::Types | Mode::TypesLocations if self.fixed_rooms.is_some() => {
                return Err(ApiError::bad_request(format!("fixed_rooms is only valid for mode part, not {}", self.mode)));
            }
            _ => {}
        }
        if self.mode == Mode::TypesLocations {
            if specs.iter().any(|s| s.cx.is_none() || s.cy.is_none()) {
                return Err(ApiError::bad_request("mode t_and_l requires cx and cy for every room"));
            }
            for s in &specs {
                let (cx, cy) = (s.cx.unwrap_or(0.0), s.cy.unwrap_or(0.0));
                if !(0.0..=255.0).contains(&cx) || !(0.0..=255.0).contains(&cy) {
                    return Err(ApiError::unprocessable(format!("room center ({cx}, {cy}) is outside the frame")));
                }
            }
        }
        if self.mode == Mode::Partial {
            for &i in &fixed {
                let spec = specs
                    .get(i)
                    .ok_or_else(|| ApiError::unprocessable(format!("fixed room {i} does not exist")))?;
                if [spec.cx, spec.cy, spec.w, spec.h].iter().any(Option::is_none) {
                    return Err(ApiError::bad_request(format!("fixed room {i} needs cx, cy, w and h")));
                }
                spec.to_room()
                    .validate()
                    .map_err(|e| ApiError::unprocessable(format!("fixed room {i}: {e}")))?;
            }
        }
        Ok(Constraints {
            rooms: specs.iter().map(RoomSpec::to_room).collect(),
            fixed,
            boundary: self.boundary.clone(),
            entrance: self.entrance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    /// Candidate set to pick from; the latest when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<usize>,
    pub candidate: usize,
    /// Room indices of the candidate to keep.
    pub pin: Vec<usize>,
    #[serde(flatten)]
    pub params: SampleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub session_id: String,
    pub candidates: Vec<FloorPlan>,
    /// Per-candidate seeds; candidate `i` is reproduced by sampling with
    /// `seeds[i]` alone.
    pub seeds: Vec<u64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}
