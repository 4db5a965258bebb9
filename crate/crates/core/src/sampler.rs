//! Reverse-process generation under a condition mode.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{param_rng, Denoiser};
use crate::diffusion::{reverse_step, Schedule};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::masking::{apply_mask, build_mask, ConditionMask, Mode};
use crate::plan::{
    canonical_order, decode_plan, decode_row, encode_condition, encode_rooms_in_order, BoundaryCondition, FloorPlan, PlanTensor,
    Room, COL_IS_ROOM, ENTRANCE_CORNERS, MAX_ROOMS, PLAN_COLS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub k: usize,
    pub seed: u64,
    pub noise_inject: bool,
    pub alpha: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            k: 1,
            seed: 0,
            noise_inject: false,
            alpha: 0.1,
        }
    }
}

/// Everything the reverse process conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub condition: BoundaryCondition,
    pub mask: ConditionMask,
    /// Values for the pinned entries; free entries are ignored.
    pub user_x0: PlanTensor,
}

/// One generated variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub tensor: PlanTensor,
    pub plan: FloorPlan,
}

fn normal(rng: &mut impl Rng) -> PlanTensor {
    let v: Vec<f64> = (0..MAX_ROOMS * PLAN_COLS).map(|_| StandardNormal.sample(rng)).collect();
    PlanTensor::from_flat(&v)
}

fn check_request(req: &GenerationRequest, opts: &SampleOptions) -> Result<()> {
    if opts.k == 0 {
        return Err(Error::InvalidRequest("k must be at least 1".into()));
    }
    if !(opts.alpha.is_finite() && opts.alpha >= 0.0) {
        return Err(Error::InvalidRequest("alpha must be finite and >= 0".into()));
    }
    if !req.user_x0.is_finite() {
        return Err(Error::InvalidRequest("non-finite constraint values".into()));
    }
    for &r in &req.mask.fixed_rows {
        if req.user_x0.0[r][COL_IS_ROOM] <= 0.0 {
            return Err(Error::InvalidRequest(format!("fixed row {r} holds no room")));
        }
    }
    Ok(())
}

/// Seed of variant `i` in a call seeded with `seed`.
pub fn variant_seed(seed: u64, i: usize) -> u64 {
    param_rng(seed, &format!("variant/{i}")).next_u64()
}

/// Runs the masked reverse chain for `k` variants, variant `i` seeded with
/// [`variant_seed`]`(seed, i)`.
pub fn generate(model: &Denoiser, schedule: &Schedule, req: &GenerationRequest, opts: &SampleOptions) -> Result<Vec<Variant>> {
    let seeds: Vec<u64> = (0..opts.k).map(|i| variant_seed(opts.seed, i)).collect();
    generate_seeded(model, schedule, req, &seeds, opts)
}

/// Runs one chain per entry of `seeds`, batched. Each chain draws all of its
/// noise from its own stream, so a variant only depends on its seed; `k` and
/// `seed` in `opts` are ignored.
pub fn generate_seeded(
    model: &Denoiser,
    schedule: &Schedule,
    req: &GenerationRequest,
    seeds: &[u64],
    opts: &SampleOptions,
) -> Result<Vec<Variant>> {
    let opts = &SampleOptions { k: seeds.len(), ..*opts };
    check_request(req, opts)?;
    let steps = schedule.steps();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| param_rng(s, "variant")).collect();
    let mut xs: Vec<PlanTensor> = rngs.iter_mut().map(normal).collect();
    let conds = vec![req.condition; opts.k];
    for t in (1..=steps).rev() {
        let masked: Vec<PlanTensor> = xs.iter().map(|x| apply_mask(x, &req.user_x0, &req.mask)).collect();
        let eps_hat = model.predict_batch(&masked, &vec![t; opts.k], &conds)?;
        for i in 0..opts.k {
            let z = if t > 1 { normal(&mut rngs[i]) } else { PlanTensor::zeros() };
            let mut next = reverse_step(schedule, &masked[i], t, &eps_hat[i], &z)?;
            if opts.noise_inject {
                let n = normal(&mut rngs[i]);
                let scale = opts.alpha * t as f64 / steps as f64;
                next = next.zip_map(&n, |x, e| x + scale * e);
                next = apply_mask(&next, &req.user_x0, &req.mask);
            }
            xs[i] = next;
        }
    }
    Ok(xs
        .into_iter()
        .map(|x| {
            let tensor = apply_mask(&x.clip(-1.0, 1.0), &req.user_x0, &req.mask);
            Variant {
                plan: decode_plan(&tensor),
                tensor,
            }
        })
        .collect())
}

/// User-facing constraints in pixel units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Known rooms. Mode `t` reads only their types, `t_and_l` types and
    /// centers, `part` the rooms listed in `fixed`.
    #[serde(default)]
    pub rooms: Vec<Room>,
    /// Indices into `rooms` pinned in mode part.
    #[serde(default)]
    pub fixed: Vec<usize>,
    #[serde(default)]
    pub boundary: Option<Vec<Point>>,
    #[serde(default)]
    pub entrance: Option<[Point; ENTRANCE_CORNERS]>,
}

/// A prepared request plus the slot each input room occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRequest {
    pub request: GenerationRequest,
    /// `rows[i]` is the tensor row of `rooms[i]`.
    pub rows: Vec<usize>,
}

impl Constraints {
    /// Encodes rooms in canonical slot order and builds the mask. The
    /// boundary condition is enabled when a boundary is given and the model
    /// was trained with one.
    pub fn prepare(&self, mode: Mode, boundary_enabled: bool) -> Result<PreparedRequest> {
        if self.rooms.len() > MAX_ROOMS {
            return Err(Error::InvalidRequest(format!("{} rooms exceeds the limit of {MAX_ROOMS}", self.rooms.len())));
        }
        if matches!(mode, Mode::Types | Mode::TypesLocations) && self.rooms.is_empty() {
            return Err(Error::InvalidRequest(format!("mode {mode} needs at least one room")));
        }
        if mode != Mode::Partial && !self.fixed.is_empty() {
            return Err(Error::InvalidRequest(format!("fixed rooms are only valid for mode part, not {mode}")));
        }
        if let Some(&bad) = self.fixed.iter().find(|&&i| i >= self.rooms.len()) {
            return Err(Error::InvalidRequest(format!("fixed index {bad} has no room")));
        }
        let order = canonical_order(&self.rooms);
        let mut rows = vec![0; self.rooms.len()];
        for (row, &i) in order.iter().enumerate() {
            rows[i] = row;
        }
        let user_x0 = if mode == Mode::Auto {
            PlanTensor::padding()
        } else {
            encode_rooms_in_order(&self.rooms, &order)?
        };
        let mask = match mode {
            Mode::Partial => {
                let mut fixed: Vec<usize> = self.fixed.iter().map(|&i| rows[i]).collect();
                fixed.sort_unstable();
                fixed.dedup();
                build_mask(mode, Some(&fixed))?
            }
            _ => build_mask(mode, None)?,
        };
        let condition = match (&self.boundary, boundary_enabled) {
            (Some(b), true) => encode_condition(Some(b.as_slice()), self.entrance.as_ref(), true)?,
            _ => BoundaryCondition::disabled(),
        };
        Ok(PreparedRequest {
            request: GenerationRequest {
                condition,
                mask,
                user_x0,
            },
            rows,
        })
    }
}

impl PreparedRequest {
    /// Decodes a variant, copying user-given fields verbatim into the rows
    /// they pin and attaching the user's boundary and entrance.
    pub fn finish(&self, constraints: &Constraints, tensor: &PlanTensor) -> FloorPlan {
        let mode = self.request.mask.mode;
        let mut rooms = Vec::new();
        for (r, row) in tensor.0.iter().enumerate() {
            let Some(mut room) = decode_row(row) else { continue };
            if let Some(i) = self.rows.iter().position(|&x| x == r) {
                let given = &constraints.rooms[i];
                match mode {
                    Mode::TypesLocations => {
                        room.cx = given.cx;
                        room.cy = given.cy;
                    }
                    Mode::Partial if self.request.mask.fixed_rows.contains(&r) => room = given.clone(),
                    _ => {}
                }
            }
            rooms.push(room);
        }
        FloorPlan {
            rooms,
            boundary: constraints.boundary.clone(),
            entrance: constraints.entrance,
        }
    }
}

/// Generates one plan per seed.
pub fn generate_plans_seeded(
    model: &Denoiser,
    schedule: &Schedule,
    constraints: &Constraints,
    mode: Mode,
    boundary_enabled: bool,
    seeds: &[u64],
    opts: &SampleOptions,
) -> Result<Vec<FloorPlan>> {
    let prepared = constraints.prepare(mode, boundary_enabled)?;
    Ok(generate_seeded(model, schedule, &prepared.request, seeds, opts)?
        .iter()
        .map(|v| prepared.finish(constraints, &v.tensor))
        .collect())
}

/// Generates `opts.k` plans from `opts.seed`.
pub fn generate_plans(
    model: &Denoiser,
    schedule: &Schedule,
    constraints: &Constraints,
    mode: Mode,
    boundary_enabled: bool,
    opts: &SampleOptions,
) -> Result<Vec<FloorPlan>> {
    let seeds: Vec<u64> = (0..opts.k).map(|i| variant_seed(opts.seed, i)).collect();
    generate_plans_seeded(model, schedule, constraints, mode, boundary_enabled, &seeds, opts)
}
