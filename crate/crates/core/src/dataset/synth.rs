//! Synthetic floor plans for fixtures and smoke runs.
//!
//! A rectangular or L-shaped footprint is cut by guillotine splits into
//! rooms that tile it exactly. All coordinates are even, and two distinct
//! wall coordinates on the same axis are at least [`SynthConfig::wall_separation`]
//! apart, so small perturbations never make unrelated walls look aligned.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{point_in_polygon, rect_union_outline, Point, Rect};
use crate::plan::{FloorPlan, Room, RoomType};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub min_rooms: usize,
    pub max_rooms: usize,
    pub l_shape_probability: f64,
    pub min_side: i32,
    pub wall_separation: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_rooms: 3,
            max_rooms: 8,
            l_shape_probability: 0.4,
            min_side: 24,
            wall_separation: 12,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

impl Piece {
    fn area(&self) -> i32 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn rect(&self) -> Rect {
        Rect::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}

fn even_in(rng: &mut impl Rng, lo: i32, hi: i32) -> Option<i32> {
    let lo = lo + lo.rem_euclid(2);
    let hi = hi - hi.rem_euclid(2);
    (lo <= hi).then(|| lo + 2 * rng.random_range(0..=(hi - lo) / 2))
}

fn separated(c: i32, walls: &[i32], sep: i32) -> bool {
    walls.iter().all(|&w| w == c || (w - c).abs() >= sep)
}

fn footprint(rng: &mut impl Rng, cfg: &SynthConfig) -> (Vec<Piece>, Vec<i32>, Vec<i32>) {
    let x0 = even_in(rng, 16, 56).unwrap();
    let y0 = even_in(rng, 16, 56).unwrap();
    let x1 = even_in(rng, x0 + 96, (x0 + 200).min(238)).unwrap();
    let y1 = even_in(rng, y0 + 96, (y0 + 200).min(238)).unwrap();
    if !rng.random_bool(cfg.l_shape_probability) {
        return (vec![Piece { x0, y0, x1, y1 }], vec![x0, x1], vec![y0, y1]);
    }
    // Cut a notch off one corner; the L is kept as two full-height pieces.
    let nx = even_in(rng, x0 + (x1 - x0) / 2, x1 - (x1 - x0) / 4).unwrap();
    let ny = even_in(rng, y0 + (y1 - y0) / 4, y0 + (y1 - y0) / 2).unwrap();
    let (right, top) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let (nxc, nyc) = (if right { nx } else { x0 + x1 - nx }, if top { ny } else { y0 + y1 - ny });
    let pieces = match (right, top) {
        (true, true) => vec![Piece { x0, y0, x1: nxc, y1 }, Piece { x0: nxc, y0: nyc, x1, y1 }],
        (true, false) => vec![Piece { x0, y0, x1: nxc, y1 }, Piece { x0: nxc, y0, x1, y1: nyc }],
        (false, true) => vec![Piece { x0: nxc, y0, x1, y1 }, Piece { x0, y0: nyc, x1: nxc, y1 }],
        (false, false) => vec![Piece { x0: nxc, y0, x1, y1 }, Piece { x0, y0, x1: nxc, y1: nyc }],
    };
    (pieces, vec![x0, x1, nxc], vec![y0, y1, nyc])
}

fn try_split(
    p: &Piece,
    rng: &mut impl Rng,
    cfg: &SynthConfig,
    xs: &[i32],
    ys: &[i32],
) -> Option<(Piece, Piece, bool, i32)> {
    let (w, h) = (p.x1 - p.x0, p.y1 - p.y0);
    let vertical_first = w > h || (w == h && rng.random_bool(0.5));
    for vertical in [vertical_first, !vertical_first] {
        let (lo, hi, walls) = if vertical { (p.x0, p.x1, xs) } else { (p.y0, p.y1, ys) };
        for _ in 0..24 {
            let Some(c) = even_in(rng, lo + cfg.min_side, hi - cfg.min_side) else { break };
            if !separated(c, walls, cfg.wall_separation) {
                continue;
            }
            return Some(if vertical {
                (Piece { x1: c, ..*p }, Piece { x0: c, ..*p }, true, c)
            } else {
                (Piece { y1: c, ..*p }, Piece { y0: c, ..*p }, false, c)
            });
        }
    }
    None
}

fn draw_type(rng: &mut impl Rng) -> RoomType {
    let u: f64 = rng.random();
    match u {
        u if u < 0.45 => RoomType::Bedroom,
        u if u < 0.65 => RoomType::Bathroom,
        u if u < 0.82 => RoomType::Kitchen,
        u if u < 0.94 => RoomType::Balcony,
        _ => RoomType::Storage,
    }
}

fn entrance_for(room: &Rect, boundary: &[Point], rng: &mut impl Rng) -> Option<[Point; 4]> {
    let [cx, cy] = room.center();
    // Side midpoints with their outward normals.
    let mut sides = [
        ([cx, room.y0], [0.0, -1.0]),
        ([room.x1, cy], [1.0, 0.0]),
        ([cx, room.y1], [0.0, 1.0]),
        ([room.x0, cy], [-1.0, 0.0]),
    ];
    sides.shuffle(rng);
    sides.iter().find_map(|&(m, n)| {
        let outside = [m[0] + 2.0 * n[0], m[1] + 2.0 * n[1]];
        if point_in_polygon(outside, boundary) {
            return None;
        }
        let (hw, hh) = if n[0] == 0.0 { (6.0, 2.0) } else { (2.0, 6.0) };
        Some(Rect::new(m[0] - hw, m[1] - hh, m[0] + hw, m[1] + hh).corners())
    })
}

pub fn synth_plan_with(rng: &mut impl Rng, cfg: &SynthConfig) -> FloorPlan {
    let (mut pieces, mut xs, mut ys) = footprint(rng, cfg);
    let boundary = rect_union_outline(&pieces.iter().map(Piece::rect).collect::<Vec<_>>())
        .expect("footprint pieces are connected");
    // Larger homes get more rooms, as in real layouts.
    let floor_area: i32 = pieces.iter().map(Piece::area).sum();
    let scaled = (floor_area as f64 - 9000.0) / 32000.0 * (cfg.max_rooms - cfg.min_rooms) as f64;
    let target = (cfg.min_rooms as f64 + scaled.max(0.0)).round() as usize;
    let target = target.clamp(cfg.min_rooms.max(pieces.len()), cfg.max_rooms);
    let mut stuck = 0;
    while pieces.len() < target && stuck < 8 {
        // Prefer large pieces but leave room for variety.
        pieces.sort_by_key(|p| std::cmp::Reverse(p.area()));
        let pick = if rng.random_bool(0.7) { 0 } else { rng.random_range(0..pieces.len()) };
        match try_split(&pieces[pick], rng, cfg, &xs, &ys) {
            Some((a, b, vertical, c)) => {
                pieces[pick] = a;
                pieces.push(b);
                if vertical { xs.push(c) } else { ys.push(c) }
                stuck = 0;
            }
            None => stuck += 1,
        }
    }
    pieces.sort_by_key(|p| std::cmp::Reverse(p.area()));
    let rooms: Vec<Room> = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = if i == 0 { RoomType::Living } else { draw_type(rng) };
            Room::from_rect(t, &p.rect())
        })
        .collect();
    // The front door opens into the living room when it reaches the outside.
    let entrance = rooms.iter().find_map(|r| entrance_for(&r.rect(), &boundary, rng));
    FloorPlan {
        rooms,
        boundary: Some(boundary),
        entrance,
    }
}

pub fn synth_plan(rng: &mut impl Rng) -> FloorPlan {
    synth_plan_with(rng, &SynthConfig::default())
}

/// `n` plans from one seeded stream.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<FloorPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_plan(&mut rng)).collect()
}

/// Moves every room edge independently by an integer offset in
/// `[-amplitude, amplitude]`, keeping each side at least two pixels long.
pub fn jitter_plan(plan: &FloorPlan, amplitude: i32, rng: &mut impl Rng) -> FloorPlan {
    let mut out = plan.clone();
    for room in &mut out.rooms {
        let r = room.rect();
        let mut d = || rng.random_range(-amplitude..=amplitude) as f64;
        let (mut x0, mut y0, mut x1, mut y1) = (r.x0 + d(), r.y0 + d(), r.x1 + d(), r.y1 + d());
        if x1 - x0 < 2.0 {
            x1 = x0 + 2.0;
        }
        if y1 - y0 < 2.0 {
            y1 = y0 + 2.0;
        }
        x0 = x0.max(0.0);
        y0 = y0.max(0.0);
        x1 = x1.min(255.0);
        y1 = y1.min(255.0);
        *room = Room::from_rect(room.room_type, &Rect::new(x0, y0, x1, y1));
    }
    out
}
