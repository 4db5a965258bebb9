//! Evaluation metrics: graph edit distance, plan statistics, variant
//! diversity and indexed raster export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::plan::{canonical_order, FloorPlan, RoomType};
use crate::postprocess::{build_adjacency, AdjacencyGraph};

/// Exact graph edit distance with unit costs for node insertion, deletion and
/// relabeling and edge insertion and deletion.
pub fn ged(a: &AdjacencyGraph, b: &AdjacencyGraph) -> usize {
    let (ma, mb) = (a.matrix(), b.matrix());
    let mut search = GedSearch {
        a: &a.nodes,
        b: &b.nodes,
        ma: &ma,
        mb: &mb,
        map: vec![None; a.len()],
        used: vec![false; b.len()],
        best: trivial_upper_bound(a, b),
    };
    search.descend(0, 0);
    search.best
}

/// Cost of deleting all of `a` and inserting all of `b`.
fn trivial_upper_bound(a: &AdjacencyGraph, b: &AdjacencyGraph) -> usize {
    a.len() + a.edges.len() + b.len() + b.edges.len()
}

struct GedSearch<'a> {
    a: &'a [RoomType],
    b: &'a [RoomType],
    ma: &'a [Vec<bool>],
    mb: &'a [Vec<bool>],
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: usize,
}

impl GedSearch<'_> {
    /// Lower bound on node costs for the unassigned remainder: every unmatched
    /// label costs at least one operation.
    fn node_bound(&self, next: usize) -> usize {
        let mut counts = [0i64; 7];
        for t in &self.a[next..] {
            counts[t.id() as usize] += 1;
        }
        let mut rest_b = 0;
        let mut common = 0;
        let mut cb = [0i64; 7];
        for (j, t) in self.b.iter().enumerate() {
            if !self.used[j] {
                cb[t.id() as usize] += 1;
                rest_b += 1;
            }
        }
        for k in 0..7 {
            common += counts[k].min(cb[k]);
        }
        let rest_a = (self.a.len() - next) as i64;
        (rest_a.max(rest_b) - common) as usize
    }

    /// Cost added by assigning `u` to `target`, counting node cost and edges
    /// to already assigned nodes.
    fn step_cost(&self, u: usize, target: Option<usize>) -> usize {
        let mut c = match target {
            Some(x) => usize::from(self.a[u] != self.b[x]),
            None => 1,
        };
        for v in 0..u {
            let ea = self.ma[u][v];
            c += match (target, self.map[v]) {
                (Some(x), Some(y)) => usize::from(ea != self.mb[x][y]),
                _ => usize::from(ea),
            };
        }
        c
    }

    /// Insertion cost for `b` nodes left unused and every `b` edge touching
    /// them.
    fn completion_cost(&self) -> usize {
        let n = self.b.len();
        let mut c = self.used.iter().filter(|u| !**u).count();
        for x in 0..n {
            for y in (x + 1)..n {
                if self.mb[x][y] && (!self.used[x] || !self.used[y]) {
                    c += 1;
                }
            }
        }
        c
    }

    fn descend(&mut self, u: usize, cost: usize) {
        if u == self.a.len() {
            self.best = self.best.min(cost + self.completion_cost());
            return;
        }
        if cost + self.node_bound(u) >= self.best {
            return;
        }
        // Matching labels first finds good bounds early.
        let mut options: Vec<Option<usize>> = (0..self.b.len()).filter(|&x| !self.used[x]).map(Some).collect();
        options.sort_by_key(|o| usize::from(self.a[u] != self.b[o.unwrap()]));
        options.push(None);
        for target in options {
            let c = cost + self.step_cost(u, target);
            if c >= self.best {
                continue;
            }
            if let Some(x) = target {
                self.used[x] = true;
            }
            self.map[u] = target;
            self.descend(u + 1, c);
            self.map[u] = None;
            if let Some(x) = target {
                self.used[x] = false;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub nr: f64,
    pub cl: f64,
    pub cr: f64,
    pub al: f64,
    pub ab: f64,
    pub ao: f64,
}

impl PlanStats {
    pub const NAMES: [&'static str; 6] = ["nr", "cl", "cr", "al", "ab", "ao"];

    pub fn values(&self) -> [f64; 6] {
        [self.nr, self.cl, self.cr, self.al, self.ab, self.ao]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            nr: v[0],
            cl: v[1],
            cr: v[2],
            al: v[3],
            ab: v[4],
            ao: v[5],
        }
    }

    pub fn mean(all: &[PlanStats]) -> PlanStats {
        let mut acc = [0.0; 6];
        for s in all {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        let n = all.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }

    /// Fieldwise `self / gt`; a zero over zero counts as 1.
    pub fn ratio_to(&self, gt: &PlanStats) -> PlanStats {
        let mut out = [0.0; 6];
        for (i, (p, g)) in self.values().into_iter().zip(gt.values()).enumerate() {
            out[i] = if g == 0.0 && p == 0.0 { 1.0 } else { p / g };
        }
        Self::from_values(out)
    }
}

/// Room count, living-room connectivity and area fractions. The first living
/// room is the one whose degree counts.
pub fn plan_statistics(plan: &FloorPlan, graph: &AdjacencyGraph) -> Result<PlanStats> {
    let total: f64 = plan.rooms.iter().map(|r| r.area()).sum();
    if total <= 0.0 {
        return Err(Error::Metric("plan has zero total room area".into()));
    }
    let nr = plan.rooms.len();
    let cl = plan
        .rooms
        .iter()
        .position(|r| r.room_type == RoomType::Living)
        .map_or(0, |i| graph.degree(i));
    let frac = |keep: &dyn Fn(RoomType) -> bool| {
        plan.rooms.iter().filter(|r| keep(r.room_type)).map(|r| r.area()).sum::<f64>() / total
    };
    Ok(PlanStats {
        nr: nr as f64,
        cl: cl as f64,
        cr: if nr > 1 { cl as f64 / (nr - 1) as f64 } else { 0.0 },
        al: frac(&|t| t == RoomType::Living),
        ab: frac(&|t| t == RoomType::Bedroom),
        ao: frac(&|t| t != RoomType::Living && t != RoomType::Bedroom),
    })
}

/// Side of the square raster used for diversity and export.
pub const RASTER_SIZE: usize = 512;
/// Palette index of boundary walls.
pub const WALL_INDEX: u8 = 7;
/// RGB colours for palette indices 0 (background), 1 to 6 (room types) and 7
/// (walls).
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 255, 255],
    [238, 214, 160],
    [170, 204, 238],
    [238, 170, 136],
    [170, 221, 204],
    [204, 221, 136],
    [204, 187, 221],
    [40, 40, 40],
];

/// Pixel `(i, j)` covers plan coordinates `[i, i + 1) * 256 / size`.
fn pixel_range(lo: f64, hi: f64, size: usize) -> std::ops::Range<usize> {
    let s = size as f64 / 256.0;
    let a = (lo * s - 0.5).ceil().max(0.0) as usize;
    let b = ((hi * s - 0.5).ceil().max(0.0) as usize).min(size);
    a..b.max(a)
}

/// One bit per pixel, row major.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Bitmap(Vec<u64>);

impl Bitmap {
    fn new(size: usize) -> Self {
        Self(vec![0; (size * size).div_ceil(64)])
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, size: usize) {
        for j in pixel_range(y0, y1, size) {
            for i in pixel_range(x0, x1, size) {
                let k = j * size + i;
                self.0[k / 64] |= 1 << (k % 64);
            }
        }
    }

    fn count(&self) -> u64 {
        self.0.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn iou(&self, other: &Bitmap) -> Option<f64> {
        let (mut inter, mut uni) = (0u64, 0u64);
        for (a, b) in self.0.iter().zip(&other.0) {
            inter += (a & b).count_ones() as u64;
            uni += (a | b).count_ones() as u64;
        }
        (uni > 0).then(|| inter as f64 / uni as f64)
    }
}

fn category_masks(plan: &FloorPlan) -> [Bitmap; 6] {
    let mut masks = std::array::from_fn(|_| Bitmap::new(RASTER_SIZE));
    for room in &plan.rooms {
        let r = room.rect();
        let m: &mut Bitmap = &mut masks[room.room_type.id() as usize - 1];
        m.fill_rect(r.x0, r.y0, r.x1, r.y1, RASTER_SIZE);
    }
    masks
}

/// Per room type, the mean over variant pairs of the IoU between the unions
/// of that type's room regions. A pair where the type is absent from both
/// variants scores 1 and a pair where it is absent from one scores 0.
pub fn diversity(variants: &[FloorPlan]) -> Result<[f64; 6]> {
    if variants.len() < 2 {
        return Err(Error::Metric(format!("diversity needs at least 2 variants, got {}", variants.len())));
    }
    let masks: Vec<[Bitmap; 6]> = variants.iter().map(category_masks).collect();
    let mut out = [0.0; 6];
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in (i + 1)..masks.len() {
            pairs += 1;
            for c in 0..6 {
                let (a, b) = (&masks[i][c], &masks[j][c]);
                out[c] += match (a.count(), b.count()) {
                    (0, 0) => 1.0,
                    (0, _) | (_, 0) => 0.0,
                    _ => a.iou(b).unwrap_or(1.0),
                };
            }
        }
    }
    Ok(out.map(|v| v / pairs as f64))
}

fn draw_segment(img: &mut [u8], size: usize, p: Point, q: Point, value: u8) {
    let s = size as f64 / 256.0;
    let len = ((q[0] - p[0]).abs() + (q[1] - p[1]).abs()) * s;
    let n = (len * 4.0).ceil().max(1.0) as usize;
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let x = (p[0] + t * (q[0] - p[0])) * s;
        let y = (p[1] + t * (q[1] - p[1])) * s;
        let (i, j) = (x.floor().clamp(0.0, size as f64 - 1.0) as usize, y.floor().clamp(0.0, size as f64 - 1.0) as usize);
        img[j * size + i] = value;
    }
}

/// Palette indices, row major. Rooms are painted in canonical order so later
/// (smaller) rooms land on top; the boundary outline is drawn last.
pub fn rasterize(plan: &FloorPlan, size: usize) -> Vec<u8> {
    let mut img = vec![0u8; size * size];
    for i in canonical_order(&plan.rooms) {
        let room = &plan.rooms[i];
        let r = room.rect();
        for j in pixel_range(r.y0, r.y1, size) {
            for i in pixel_range(r.x0, r.x1, size) {
                img[j * size + i] = room.room_type.id();
            }
        }
    }
    if let Some(b) = &plan.boundary {
        for k in 0..b.len() {
            draw_segment(&mut img, size, b[k], b[(k + 1) % b.len()], WALL_INDEX);
        }
    }
    img
}

/// Encodes palette indices as an 8-bit indexed PNG.
pub fn encode_png(indices: &[u8], size: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, size as u32, size as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(PALETTE.concat());
        let mut w = enc.write_header().map_err(|e| Error::Metric(e.to_string()))?;
        w.write_image_data(indices).map_err(|e| Error::Metric(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, plan: &FloorPlan, size: usize) -> Result<()> {
    let bytes = encode_png(&rasterize(plan, size), size)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metrics for one ground-truth id.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub ged: usize,
    pub pred: PlanStats,
    pub gt: PlanStats,
    /// Present when at least two variants exist for the id.
    pub diversity: Option<[f64; 6]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<SampleRow>,
    /// Ids present on only one side.
    pub unmatched: Vec<String>,
}

impl Report {
    pub fn mean_pred(&self) -> PlanStats {
        PlanStats::mean(&self.rows.iter().map(|r| r.pred).collect::<Vec<_>>())
    }

    pub fn mean_gt(&self) -> PlanStats {
        PlanStats::mean(&self.rows.iter().map(|r| r.gt).collect::<Vec<_>>())
    }

    pub fn mean_ged(&self) -> f64 {
        self.rows.iter().map(|r| r.ged as f64).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Tab-free comma separated text: a comment line stating the empty
    /// category convention, a header, one row per id, then aggregate rows.
    pub fn to_csv(&self) -> String {
        let types: Vec<String> = RoomType::ALL.iter().map(|t| format!("div_{}", t.name())).collect();
        let mut s = String::from("# diversity: a room type absent from both variants of a pair scores 1\n");
        s.push_str(&format!("id,ged,{},{}\n", PlanStats::NAMES.join(","), types.join(",")));
        let fmt = |v: [f64; 6]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        let na = vec!["NA"; 6].join(",");
        for r in &self.rows {
            let div = r.diversity.map_or(na.clone(), fmt);
            s.push_str(&format!("{},{},{},{}\n", r.id, r.ged, fmt(r.pred.values()), div));
        }
        let divs: Vec<[f64; 6]> = self.rows.iter().filter_map(|r| r.diversity).collect();
        let mean_div = if divs.is_empty() {
            na.clone()
        } else {
            let mut acc = [0.0; 6];
            for d in &divs {
                for (a, v) in acc.iter_mut().zip(d) {
                    *a += v;
                }
            }
            fmt(acc.map(|a| a / divs.len() as f64))
        };
        if !self.rows.is_empty() {
            let (mp, mg) = (self.mean_pred(), self.mean_gt());
            s.push_str(&format!("mean_pred,{:.6},{},{}\n", self.mean_ged(), fmt(mp.values()), mean_div));
            s.push_str(&format!("mean_gt,0,{},{}\n", fmt(mg.values()), na));
            s.push_str(&format!("ratio_to_gt,NA,{},{}\n", fmt(mp.ratio_to(&mg).values()), na));
        }
        s
    }
}

/// Evaluates variant lists against ground truth, in parallel across ids.
/// The first variant supplies the graph and statistics.
pub fn evaluate(pairs: &[(String, Vec<FloorPlan>, FloorPlan)], tau: f64) -> Result<Vec<SampleRow>> {
    pairs
        .par_iter()
        .map(|(id, preds, gt)| {
            let first = preds.first().ok_or_else(|| Error::Metric(format!("{id}: no prediction")))?;
            let (gp, gg) = (build_adjacency(first, tau), build_adjacency(gt, tau));
            Ok(SampleRow {
                id: id.clone(),
                ged: ged(&gp, &gg),
                pred: plan_statistics(first, &gp)?,
                gt: plan_statistics(gt, &gg)?,
                diversity: if preds.len() >= 2 { Some(diversity(preds)?) } else { None },
            })
        })
        .collect()
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs `gt/<id>.json` with `pred/<id>.json` or variants `pred/<id>.<k>.json`
/// and evaluates them. Ids on one side only are reported as unmatched.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, tau: f64) -> Result<Report> {
    let mut preds: BTreeMap<String, Vec<FloorPlan>> = BTreeMap::new();
    for p in json_files(pred_dir)? {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let id = stem.split('.').next().unwrap_or_default().to_string();
        preds.entry(id).or_default().push(FloorPlan::read(&p)?);
    }
    let mut gts = BTreeMap::new();
    for p in json_files(gt_dir)? {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        gts.insert(id, FloorPlan::read(&p)?);
    }
    let mut unmatched: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    unmatched.extend(gts.keys().filter(|k| !preds.contains_key(*k)).cloned());
    unmatched.sort();
    let pairs: Vec<_> = gts
        .into_iter()
        .filter_map(|(id, gt)| preds.remove(&id).map(|p| (id, p, gt)))
        .collect();
    Ok(Report {
        rows: evaluate(&pairs, tau)?,
        unmatched,
    })
}
