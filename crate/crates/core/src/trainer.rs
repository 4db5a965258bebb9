//! The training loop.
//!
//! Every step draws its randomness from a stream keyed by `(seed, step)`, so
//! a run resumed from a checkpoint replays exactly the steps an
//! uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::checkpoint::{self, CheckpointMeta, OPTIMIZER_PREFIX};
use crate::dataset::{encode_corpus, make_batch, EncodedPlan, ModePolicy, Sample};
use crate::denoiser::{param_rng, Denoiser, DenoiserConfig, ParamStore, Precision};
use crate::diffusion::{forward_sample, Schedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::losses::tensor::{align_bound, align_neigh, masked_mse, SoftBoxes};
use crate::losses::{LossParts, LossWeights};
use crate::masking::{apply_mask, Mode};
use crate::plan::{FloorPlan, PlanTensor, MAX_CORNERS, MAX_ROOMS, PLAN_COLS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub val_every: usize,
    /// Validation samples evaluated per validation pass.
    pub val_samples: usize,
    pub boundary_enabled: bool,
    pub precision: Precision,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub loss: LossWeights,
    pub policy: ModePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 100_000,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 5_000,
            val_every: 1_000,
            val_samples: 256,
            boundary_enabled: true,
            precision: Precision::F32,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            loss: LossWeights::default(),
            policy: ModePolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam moments must lie in [0, 1) and eps > 0");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be >= 0");
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.policy.validate()?;
        Schedule::linear(self.schedule)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Adam with bias correction; moments live alongside the parameters so they
/// can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.to_string(), var.as_tensor().zeros_like()?);
            v.insert(name.to_string(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { lr, beta1, beta2, eps, t: 0, m, v })
    }

    /// Applies one update with gradients scaled by `scale`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = self.v.get_mut(name).expect("moment per parameter");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let update = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        for (k, t) in &self.m {
            out.insert(format!("{OPTIMIZER_PREFIX}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{OPTIMIZER_PREFIX}v.{k}"), t.clone());
        }
    }

    fn import(&mut self, tensors: &BTreeMap<String, Tensor>, dtype: DType) -> Result<()> {
        for (store, tag) in [(&mut self.m, "m"), (&mut self.v, "v")] {
            for (k, slot) in store.iter_mut() {
                let t = tensors
                    .get(&format!("{OPTIMIZER_PREFIX}{tag}.{k}"))
                    .ok_or_else(|| Error::CheckpointMismatch(format!("optimizer state for {k} missing")))?;
                *slot = t.to_dtype(dtype)?;
            }
        }
        Ok(())
    }
}

/// Scalars reported by one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
    pub grad_norm: f64,
}

/// Tensors for one batch.
struct BatchTensors {
    m_xt: Tensor,
    cond: Tensor,
    mask: Tensor,
    eps: Tensor,
    x0: Tensor,
    sqrt_ab: Tensor,
    sqrt_1mab: Tensor,
    corners: Tensor,
    enabled: Tensor,
    t: Vec<usize>,
}

fn standard_normal(rng: &mut impl Rng) -> PlanTensor {
    let v: Vec<f64> = (0..MAX_ROOMS * PLAN_COLS).map(|_| StandardNormal.sample(rng)).collect();
    PlanTensor::from_flat(&v)
}

fn to_tensor(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct Trainer {
    pub config: RunConfig,
    pub schedule: Schedule,
    pub model: Denoiser,
    pub optimizer: Adam,
    /// Completed steps.
    pub step: usize,
    train: Vec<EncodedPlan>,
    val: Vec<EncodedPlan>,
    /// Mode counts over all consumed samples, `auto, t, t_and_l, part`.
    pub mode_counts: [usize; 4],
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: RunConfig, train: &[FloorPlan], val: &[FloorPlan]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Corpus("no training plans".into()));
        }
        let schedule = Schedule::linear(config.schedule)?;
        let model = Denoiser::new(config.model.clone(), config.seed, config.precision.dtype())?;
        let optimizer = Adam::new(&model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)?;
        Ok(Self {
            train: encode_corpus(train, config.boundary_enabled)?,
            val: encode_corpus(val, config.boundary_enabled)?,
            config,
            schedule,
            model,
            optimizer,
            step: 0,
            mode_counts: [0; 4],
            out_dir: None,
        })
    }

    /// Continues from a trainer checkpoint. The model and schedule settings
    /// must match the stored ones.
    pub fn resume(config: RunConfig, path: &Path, train: &[FloorPlan], val: &[FloorPlan]) -> Result<Self> {
        let mut trainer = Self::new(config, train, val)?;
        let (meta, tensors) = checkpoint::load(path)?;
        if meta.denoiser != trainer.config.model {
            return Err(Error::CheckpointMismatch("model config differs from the checkpoint".into()));
        }
        if meta.fingerprint != trainer.schedule.fingerprint() {
            return Err(Error::CheckpointMismatch("schedule differs from the checkpoint".into()));
        }
        if meta.boundary_enabled != trainer.config.boundary_enabled {
            return Err(Error::CheckpointMismatch("boundary setting differs from the checkpoint".into()));
        }
        let dtype = trainer.model.dtype();
        for (name, var) in trainer.model.params.vars() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("parameter {name} missing")))?;
            var.set(&t.to_dtype(dtype)?)?;
        }
        trainer.optimizer.import(&tensors, dtype)?;
        trainer.optimizer.t = meta.step;
        trainer.step = meta.step;
        Ok(trainer)
    }

    /// Directory for checkpoints, logs and diagnostic dumps.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn step_rng(&self, step: usize, purpose: &str) -> ChaCha8Rng {
        param_rng(self.config.seed, &format!("{purpose}/{step}"))
    }

    fn draw_batch(&self, plans: &[EncodedPlan], ids: &[usize], policy: &ModePolicy, rng: &mut ChaCha8Rng) -> Result<(Vec<Sample>, Vec<usize>, Vec<PlanTensor>)> {
        let samples = make_batch(plans, ids, policy, rng)?;
        let t: Vec<usize> = samples.iter().map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps: Vec<PlanTensor> = samples.iter().map(|_| standard_normal(rng)).collect();
        Ok((samples, t, eps))
    }

    fn batch_tensors(&self, samples: &[Sample], t: Vec<usize>, eps: &[PlanTensor]) -> Result<BatchTensors> {
        let b = samples.len();
        let dtype = self.model.dtype();
        let mut m_xt = Vec::with_capacity(b * 48);
        let mut mask = Vec::with_capacity(b * 48);
        let mut x0 = Vec::with_capacity(b * 48);
        let mut cond = Vec::with_capacity(b * 88);
        let mut corners = Vec::with_capacity(b * 80);
        let mut enabled = Vec::with_capacity(b);
        let mut sqrt_ab = Vec::with_capacity(b);
        let mut sqrt_1mab = Vec::with_capacity(b);
        for (i, s) in samples.iter().enumerate() {
            let xt = forward_sample(&self.schedule, &s.x0, t[i], &eps[i])?;
            m_xt.extend(apply_mask(&xt, &s.x0, &s.mask).flat());
            mask.extend(s.mask.as_tensor().flat());
            x0.extend(s.x0.flat());
            cond.extend(s.condition.row());
            corners.extend_from_slice(&s.condition.boundary);
            enabled.push(if s.condition.enabled { 1.0 } else { 0.0 });
            let ab = self.schedule.alpha_bar(t[i]);
            sqrt_ab.push(ab.sqrt());
            sqrt_1mab.push((1.0 - ab).sqrt());
        }
        let plan = [b, MAX_ROOMS, PLAN_COLS];
        Ok(BatchTensors {
            m_xt: to_tensor(m_xt, &plan, dtype)?,
            cond: to_tensor(cond, &[b, 88], dtype)?,
            mask: to_tensor(mask, &plan, dtype)?,
            eps: to_tensor(eps.iter().flat_map(|e| e.flat()).collect(), &plan, dtype)?,
            x0: to_tensor(x0, &plan, dtype)?,
            sqrt_ab: to_tensor(sqrt_ab, &[b, 1, 1], dtype)?,
            sqrt_1mab: to_tensor(sqrt_1mab, &[b, 1, 1], dtype)?,
            corners: to_tensor(corners, &[b, MAX_CORNERS, 2], dtype)?,
            enabled: to_tensor(enabled, &[b], dtype)?,
            t,
        })
    }

    /// The objective on one batch; returns the total and its parts as tensors.
    fn objective(&self, bt: &BatchTensors, dropout: Option<&mut ChaCha8Rng>) -> Result<(Tensor, [Option<Tensor>; 4])> {
        let rng = dropout.map(|r| r as &mut dyn rand::RngCore);
        let eps_hat = self.model.forward(&bt.m_xt, &bt.t, &bt.cond, rng)?;
        let l_noise = masked_mse(&eps_hat, &bt.eps, &bt.mask)?;
        let x0_hat = (bt.m_xt.sub(&eps_hat.broadcast_mul(&bt.sqrt_1mab)?)?).broadcast_div(&bt.sqrt_ab)?;
        let l_gt = masked_mse(&x0_hat, &bt.x0, &bt.mask)?;
        // Pinned entries are known exactly; geometry sees them as given.
        let keep = bt.mask.affine(-1.0, 1.0)?;
        let x0_geo = ((&x0_hat * &bt.mask)? + (&bt.x0 * keep)?)?;
        let boxes = SoftBoxes::from_plan(&x0_geo)?;
        let l_neigh = align_neigh(&boxes, self.config.loss.gap_threshold)?;
        let w = &self.config.loss;
        let mut total = ((&l_noise + (&l_gt * w.lambda_gt)?)? + (&l_neigh * w.lambda_neigh)?)?;
        let l_bound = if self.config.boundary_enabled {
            let lb = align_bound(&boxes, &bt.corners, &bt.enabled)?;
            total = (total + (&lb * w.lambda_bound)?)?;
            Some(lb)
        } else {
            None
        };
        Ok((total, [Some(l_noise), Some(l_gt), l_bound, Some(l_neigh)]))
    }

    fn parts(terms: &[Option<Tensor>; 4]) -> Result<LossParts> {
        Ok(LossParts {
            noise: scalar(terms[0].as_ref().expect("always present"))?,
            gt: scalar(terms[1].as_ref().expect("always present"))?,
            bound: terms[2].as_ref().map(scalar).transpose()?,
            neigh: scalar(terms[3].as_ref().expect("always present"))?,
        })
    }

    fn dump_nonfinite(&self, samples: &[Sample], t: &[usize], parts: &LossParts) -> Option<PathBuf> {
        let dir = self.out_dir.as_ref()?;
        let records: Vec<serde_json::Value> = samples
            .iter()
            .zip(t)
            .map(|(s, t)| {
                serde_json::json!({
                    "t": t,
                    "mode": s.mask.mode,
                    "fixed_rows": s.mask.fixed_rows,
                    "x0": s.x0.0,
                    "condition_enabled": s.condition.enabled,
                })
            })
            .collect();
        let body = serde_json::json!({ "step": self.step + 1, "losses": parts, "samples": records });
        let path = dir.join(format!("nonfinite_step{}.json", self.step + 1));
        std::fs::write(&path, serde_json::to_string_pretty(&body).ok()?).ok()?;
        Some(path)
    }

    /// One gradient update on a freshly drawn batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step + 1;
        let mut rng = self.step_rng(step, "batch");
        let ids: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng.random_range(0..self.train.len()))
            .collect();
        let (samples, t, eps) = self.draw_batch(&self.train, &ids, &self.config.policy, &mut rng)?;
        for s in &samples {
            self.mode_counts[s.mask.mode.index()] += 1;
        }
        let bt = self.batch_tensors(&samples, t, &eps)?;
        let mut dropout_rng = self.step_rng(step, "dropout");
        let (total, terms) = self.objective(&bt, Some(&mut dropout_rng))?;
        let parts = Self::parts(&terms)?;
        let total_value = scalar(&total)?;
        if !total_value.is_finite() {
            let dump = self.dump_nonfinite(&samples, &bt.t, &parts);
            return Err(Error::NonFiniteLoss { step, dump });
        }
        let grads = total.backward()?;
        let mut sq = 0.0;
        for (_, var) in self.model.params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            let dump = self.dump_nonfinite(&samples, &bt.t, &parts);
            return Err(Error::NonFiniteLoss { step, dump });
        }
        let clip = self.config.grad_clip;
        let scale = if clip > 0.0 && grad_norm > clip { clip / grad_norm } else { 1.0 };
        self.optimizer.step(&self.model.params, &grads, scale)?;
        self.step = step;
        Ok(StepReport {
            step,
            parts,
            total: total_value,
            grad_norm,
        })
    }

    /// Mean masked noise loss on the validation plans, dropout off and a
    /// fixed draw of modes, steps and noise.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let n = self.config.val_samples.min(self.val.len()).max(1);
        let ids: Vec<usize> = (0..n).collect();
        let mut rng = self.step_rng(0, "validation");
        let (samples, t, eps) = self.draw_batch(&self.val, &ids, &self.config.policy, &mut rng)?;
        let mut sum = 0.0;
        for chunk in (0..n).collect::<Vec<_>>().chunks(self.config.batch_size) {
            let s: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let e: Vec<PlanTensor> = chunk.iter().map(|&i| eps[i]).collect();
            let bt = self.batch_tensors(&s, chunk.iter().map(|&i| t[i]).collect(), &e)?;
            let eps_hat = self.model.forward(&bt.m_xt, &bt.t, &bt.cond, None)?;
            sum += scalar(&masked_mse(&eps_hat, &bt.eps, &bt.mask)?)? * chunk.len() as f64;
        }
        Ok(Some(sum / n as f64))
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            denoiser: self.config.model.clone(),
            schedule: self.config.schedule,
            fingerprint: self.schedule.fingerprint(),
            step: self.step,
            boundary_enabled: self.config.boundary_enabled,
            run: Some(self.config.to_toml()),
        }
    }

    /// Parameters and optimizer moments.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.params.tensors();
        self.optimizer.export(&mut tensors);
        checkpoint::save(path, &self.checkpoint_meta(), &tensors)
    }

    /// Runs to `config.steps`, writing logs and checkpoints into the output
    /// directory. Returns the final checkpoint path.
    pub fn fit(&mut self) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .ok_or_else(|| Error::InvalidConfig("fit needs an output directory".into()))?;
        let boundary = self.config.boundary_enabled;
        let mut loss_log = CsvLog::open(
            &dir.join("loss_log.csv"),
            if boundary {
                "step,l_noise,l_gt,l_bound,l_neigh,total,grad_norm"
            } else {
                "step,l_noise,l_gt,l_neigh,total,grad_norm"
            },
        )?;
        let mut val_log = CsvLog::open(&dir.join("val_log.csv"), "step,val_l_noise")?;
        while self.step < self.config.steps {
            let r = self.train_step()?;
            let p = r.parts;
            let line = match p.bound {
                Some(b) => format!("{},{},{},{},{},{},{}", r.step, p.noise, p.gt, b, p.neigh, r.total, r.grad_norm),
                None => format!("{},{},{},{},{},{}", r.step, p.noise, p.gt, p.neigh, r.total, r.grad_norm),
            };
            loss_log.append(&line)?;
            if self.config.val_every > 0 && r.step % self.config.val_every == 0 {
                if let Some(v) = self.validate()? {
                    val_log.append(&format!("{},{v}", r.step))?;
                    info!(step = r.step, val_l_noise = v, "validation");
                }
            }
            if self.config.checkpoint_every > 0 && r.step % self.config.checkpoint_every == 0 {
                self.save_checkpoint(&dir.join(format!("ckpt_step{}.safetensors", r.step)))?;
            }
            if r.step % 100 == 0 {
                info!(step = r.step, total = r.total, l_noise = p.noise, "training");
            }
        }
        let final_path = dir.join("final.safetensors");
        self.save_checkpoint(&final_path)?;
        Ok(final_path)
    }

    /// The share of consumed samples per mode, `auto, t, t_and_l, part`.
    pub fn mode_histogram(&self) -> [f64; 4] {
        let total: usize = self.mode_counts.iter().sum();
        self.mode_counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
    }

    pub fn modes_seen(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|m| self.mode_counts[m.index()] > 0).collect()
    }
}

struct CsvLog {
    file: std::fs::File,
    path: PathBuf,
}

impl CsvLog {
    fn open(path: &Path, header: &str) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}
