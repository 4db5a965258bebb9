//! Corpus ingestion, the train/val/test split, and training batches with a
//! per-sample condition mode.

pub mod synth;

use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::masking::{build_mask, ConditionMask, Mode};
use crate::plan::{encode_plan, plan_condition, BoundaryCondition, FloorPlan, PlanRules, PlanTensor};

/// Largest tolerated fraction of invalid records in a corpus directory.
pub const MAX_INVALID_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub plan: FloorPlan,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<Record>,
    /// `(file name, reason)` for every skipped record.
    pub skipped: Vec<(String, String)>,
}

impl Corpus {
    pub fn plans(&self) -> Vec<FloorPlan> {
        self.records.iter().map(|r| r.plan.clone()).collect()
    }
}

fn check_record(plan: &FloorPlan) -> Result<()> {
    plan.validate(&PlanRules::default())?;
    // The boundary must also survive condition encoding.
    plan_condition(plan, true)?;
    Ok(())
}

/// Loads every `*.json` interchange file in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();

    let mut corpus = Corpus::default();
    for path in &paths {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match FloorPlan::read(path).and_then(|p| check_record(&p).map(|_| p)) {
            Ok(plan) => corpus.records.push(Record { id, plan }),
            Err(e) => {
                warn!(file = %name, reason = %e, "skipping record");
                corpus.skipped.push((name, e.to_string()));
            }
        }
    }
    if paths.is_empty() {
        warn!(dir = %dir.display(), "corpus directory holds no records");
    }
    let total = paths.len();
    if total > 0 && corpus.skipped.len() as f64 > MAX_INVALID_FRACTION * total as f64 {
        return Err(Error::Corpus(format!(
            "{} of {total} records invalid, first: {}: {}",
            corpus.skipped.len(),
            corpus.skipped[0].0,
            corpus.skipped[0].1
        )));
    }
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Index lists into a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Shuffled 70/15/15 split; validation and test get `floor(0.15 n)` each and
/// the remainder goes to training.
pub fn split_corpus(n: usize, seed: u64) -> DatasetSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = n * 15 / 100;
    let test = idx.split_off(n - held);
    let val = idx.split_off(n - 2 * held);
    DatasetSplit {
        train: idx,
        val,
        test,
        seed,
    }
}

/// Writes `<split>\t<id>` lines, train then val then test.
pub fn write_manifest(path: &Path, split: &DatasetSplit, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
        for &i in split.get(name) {
            out.push_str(&format!("{name}\t{}\n", ids[i]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(SplitName, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (name, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corpus(format!("bad manifest line {line:?}")))?;
            let name = match name {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                "test" => SplitName::Test,
                other => return Err(Error::Corpus(format!("unknown split {other:?}"))),
            };
            Ok((name, id.to_string()))
        })
        .collect()
}

/// How training samples pick their condition mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModePolicy {
    /// Weights for `auto, t, t_and_l, part`.
    pub weights: [f64; 4],
    /// Fractions of present rooms pinned in mode part, drawn uniformly.
    pub part_fractions: Vec<f64>,
}

impl Default for ModePolicy {
    fn default() -> Self {
        Self {
            weights: [1.0; 4],
            part_fractions: vec![0.25, 0.5, 0.75],
        }
    }
}

impl ModePolicy {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if !self.weights.iter().all(|w| w.is_finite() && *w >= 0.0) || sum <= 0.0 {
            return Err(Error::InvalidConfig("mode weights must be >= 0 with a positive sum".into()));
        }
        if self.weights[Mode::Partial.index()] > 0.0
            && (self.part_fractions.is_empty()
                || !self.part_fractions.iter().all(|f| (0.0..=1.0).contains(f)))
        {
            return Err(Error::InvalidConfig("part fractions must be non-empty and in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn draw_mode(&self, rng: &mut impl Rng) -> Mode {
        let sum: f64 = self.weights.iter().sum();
        let mut u = rng.random::<f64>() * sum;
        for m in Mode::ALL {
            let w = self.weights[m.index()];
            if u < w {
                return m;
            }
            u -= w;
        }
        // Rounding at the top end lands on the last mode with weight.
        *Mode::ALL
            .iter()
            .rev()
            .find(|m| self.weights[m.index()] > 0.0)
            .expect("validated weights")
    }

    /// Draws the pinned rows for a plan whose first `present` rows hold rooms.
    pub fn draw_fixed_rows(&self, present: usize, rng: &mut impl Rng) -> Vec<usize> {
        if present == 0 {
            return Vec::new();
        }
        let f = self.part_fractions[rng.random_range(0..self.part_fractions.len())];
        let k = ((f * present as f64).round() as usize).clamp(1, present);
        let mut rows = index::sample(rng, present, k).into_vec();
        rows.sort_unstable();
        rows
    }
}

/// A plan prepared for training: encoded matrix and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPlan {
    pub x0: PlanTensor,
    pub condition: BoundaryCondition,
    pub room_count: usize,
}

pub fn encode_corpus(plans: &[FloorPlan], boundary_enabled: bool) -> Result<Vec<EncodedPlan>> {
    plans
        .iter()
        .map(|p| {
            Ok(EncodedPlan {
                x0: encode_plan(p)?,
                condition: plan_condition(p, boundary_enabled)?,
                room_count: p.rooms.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x0: PlanTensor,
    pub condition: BoundaryCondition,
    pub mask: ConditionMask,
}

/// One sample per id, each with a mode drawn from the policy.
pub fn make_batch(
    plans: &[EncodedPlan],
    ids: &[usize],
    policy: &ModePolicy,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|&i| {
            let p = plans
                .get(i)
                .ok_or_else(|| Error::Corpus(format!("record index {i} out of range")))?;
            let mode = policy.draw_mode(rng);
            let mask = if mode == Mode::Partial {
                build_mask(mode, Some(&policy.draw_fixed_rows(p.room_count, rng)))?
            } else {
                build_mask(mode, None)?
            };
            Ok(Sample {
                x0: p.x0,
                condition: p.condition,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{Room, RoomType};
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, plan: &FloorPlan) {
        plan.write(&dir.join(name)).unwrap();
    }

    #[test]
    fn load_valid_and_skip_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let plans = synth::synth_corpus(12, 4);
        for (i, p) in plans.iter().enumerate() {
            write(dir.path(), &format!("p{i:02}.json"), p);
        }
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.records.len(), 12);
        assert_eq!(c.records[0].id, "p00");

        let mut crowded = FloorPlan::default();
        crowded.rooms.push(Room::new(RoomType::Living, 100.0, 100.0, 20.0, 20.0));
        for _ in 0..8 {
            crowded.rooms.push(Room::new(RoomType::Bedroom, 50.0, 50.0, 10.0, 10.0));
        }
        write(dir.path(), "zz.json", &crowded);
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.records.len(), 12);
        assert_eq!(c.skipped.len(), 1);
        assert_eq!(c.skipped[0].0, "zz.json");
    }

    #[test]
    fn load_empty_and_mostly_broken() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).unwrap().records.is_empty());
        for i in 0..3 {
            write(dir.path(), &format!("ok{i}.json"), &synth::synth_corpus(1, i)[0]);
        }
        std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Corpus(_))));
        assert!(load_corpus(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(80000, 0);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (56000, 12000, 12000));
        for seed in 0..5 {
            let s = split_corpus(10, seed);
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        }
        assert_eq!(split_corpus(500, 9), split_corpus(500, 9));
        assert_ne!(split_corpus(500, 9).train, split_corpus(500, 10).train);
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let n = rng.random_range(3..400);
            let seed = rng.random();
            let s = split_corpus(n, seed);
            assert_eq!(s, split_corpus(n, seed));
            let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            assert_eq!(all.len(), n);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..20).map(|i| format!("r{i}")).collect();
        let s = split_corpus(20, 1);
        let path = dir.path().join("split.tsv");
        write_manifest(&path, &s, &ids).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 20);
        let val: Vec<&String> = back.iter().filter(|(n, _)| *n == SplitName::Val).map(|(_, id)| id).collect();
        assert_eq!(val, s.val.iter().map(|&i| &ids[i]).collect::<Vec<_>>());
    }

    fn encoded(n: usize) -> Vec<EncodedPlan> {
        encode_corpus(&synth::synth_corpus(n, 2), true).unwrap()
    }

    #[test]
    fn auto_only_policy() {
        let plans = encoded(6);
        let policy = ModePolicy {
            weights: [1.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&plans, &[0, 1, 2, 3, 4, 5], &policy, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.mask.mask.iter().flatten().all(|&v| v == 1.0)));
    }

    #[test]
    fn part_policy_pins_half_the_rooms() {
        let mut plans = encoded(1);
        let four: FloorPlan = FloorPlan {
            rooms: vec![
                Room::new(RoomType::Living, 100.0, 100.0, 60.0, 60.0),
                Room::new(RoomType::Bedroom, 40.0, 40.0, 30.0, 30.0),
                Room::new(RoomType::Kitchen, 180.0, 40.0, 20.0, 30.0),
                Room::new(RoomType::Bathroom, 180.0, 180.0, 20.0, 20.0),
            ],
            ..Default::default()
        };
        plans = vec![encode_corpus(&[four], false).unwrap().remove(0), plans.remove(0)];
        let policy = ModePolicy {
            weights: [0.0, 0.0, 0.0, 1.0],
            part_fractions: vec![0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = &make_batch(&plans, &[0], &policy, &mut rng).unwrap()[0];
            assert_eq!(s.mask.fixed_rows.len(), 2);
            assert!(s.mask.fixed_rows.iter().all(|&r| r < 4));
            let pinned = s.mask.mask.iter().filter(|r| r.iter().all(|&v| v == 0.0)).count();
            assert_eq!(pinned, 2);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let plans = encoded(8);
        let ids: Vec<usize> = (0..8).collect();
        let a = make_batch(&plans, &ids, &ModePolicy::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_batch(&plans, &ids, &ModePolicy::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_frequencies_follow_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for weights in [[1.0, 1.0, 1.0, 1.0], [0.1, 0.2, 0.3, 0.4], [0.0, 3.0, 0.0, 1.0]] {
            let policy = ModePolicy {
                weights,
                ..Default::default()
            };
            let mut counts = [0usize; 4];
            let n = 10_000;
            for _ in 0..n {
                counts[policy.draw_mode(&mut rng).index()] += 1;
            }
            let total: f64 = weights.iter().sum();
            for m in 0..4 {
                let freq = counts[m] as f64 / n as f64;
                assert!((freq - weights[m] / total).abs() <= 0.02, "{weights:?} {counts:?}");
            }
        }
    }

    #[test]
    fn policy_validation() {
        assert!(ModePolicy::default().validate().is_ok());
        let zero = ModePolicy {
            weights: [0.0; 4],
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let no_fractions = ModePolicy {
            part_fractions: vec![],
            ..Default::default()
        };
        assert!(no_fractions.validate().is_err());
    }
}
