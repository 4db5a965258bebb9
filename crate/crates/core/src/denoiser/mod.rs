//! The noise predictor: Transformer encoder blocks followed by a graph
//! attention layer over the complete room graph and a three-layer head.

mod params;

pub use params::{param_rng, ParamStore};

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{BoundaryCondition, PlanTensor, BOUNDARY_WIDTH, CONDITION_WIDTH, ENTRANCE_WIDTH, MAX_ROOMS, PLAN_COLS};
use params::tensor_from_f64;

const NORM_EPS: f64 = 1e-5;
const GAT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_encoders: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub gat_heads: usize,
    pub head_hidden: [usize; 2],
    /// Learned per-slot embeddings added to the room tokens. Off by default,
    /// which keeps rows exchangeable.
    pub row_positions: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_encoders: 4,
            n_heads: 8,
            ff_dim: 2048,
            dropout: 0.1,
            gat_heads: 4,
            head_hidden: [256, 64],
            row_positions: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad("d_model must be even and positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.gat_heads == 0 || self.d_model % self.gat_heads != 0 {
            return bad("d_model must be divisible by gat_heads");
        }
        if self.ff_dim == 0 || self.head_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d = self.d_model;
        let mut out = Vec::new();
        let mut linear = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o], i));
            out.push((format!("{name}.bias"), vec![o], i));
        };
        linear("embed.room", PLAN_COLS, d);
        linear("embed.boundary", BOUNDARY_WIDTH, d);
        linear("embed.entrance", ENTRANCE_WIDTH, d);
        for b in 0..self.n_encoders {
            for proj in ["q", "k", "v", "o"] {
                linear(&format!("enc{b}.attn.{proj}"), d, d);
            }
            linear(&format!("enc{b}.ff1"), d, self.ff_dim);
            linear(&format!("enc{b}.ff2"), self.ff_dim, d);
        }
        linear("gat.out", d, d);
        let [h1, h2] = self.head_hidden;
        linear("head.0", d, h1);
        linear("head.1", h1, h2);
        linear("head.2", h2, PLAN_COLS);
        let hd = d / self.gat_heads;
        out.push(("gat.weight".into(), vec![d, d], d));
        out.push(("gat.att_src".into(), vec![self.gat_heads, hd], hd));
        out.push(("gat.att_dst".into(), vec![self.gat_heads, hd], hd));
        if self.row_positions {
            out.push(("embed.row".into(), vec![MAX_ROOMS, d], PLAN_COLS));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Sinusoidal embedding of a diffusion step: sines in the first half,
/// cosines in the second, geometric frequencies from 1 down to 1/10000.
pub fn embed_time(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > steps {
        return Err(Error::TimestepOutOfRange { t, steps });
    }
    Ok(time_features(t, dim))
}

fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// The network with its parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

/// Dropout source during training; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // Shifting by a constant leaves both value and gradient unchanged.
    let max = x.detach().max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        for (name, shape, fan_in) in config.layout() {
            params.init_uniform(seed, &name, &shape, 1.0 / (fan_in as f64).sqrt())?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = params.get(name).map_err(|_| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        let dims = x.dims().to_vec();
        let (lead, last) = dims.split_at(dims.len() - 1);
        let rows: usize = lead.iter().product();
        let y = x.reshape((rows, last[0]))?.matmul(w)?.broadcast_add(b)?;
        let mut shape = lead.to_vec();
        shape.push(w.dim(1)?);
        Ok(y.reshape(shape)?)
    }

    fn dropout(&self, x: Tensor, rng: &mut DropoutRng) -> Result<Tensor> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tensor_from_f64(mask, x.dims(), x.dtype(), x.device())?;
        Ok((x * m)?)
    }

    fn attention(&self, h: &Tensor, block: usize, rng: &mut DropoutRng) -> Result<Tensor> {
        let (b, n, d) = h.dims3()?;
        let heads = self.config.n_heads;
        let hd = d / heads;
        let split = |name: &str| -> Result<Tensor> {
            Ok(self
                .linear(h, &format!("enc{block}.attn.{name}"))?
                .reshape((b, n, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split("q")?, split("k")?, split("v")?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = self.dropout(softmax_last(&scores)?, rng)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.linear(&o, &format!("enc{block}.attn.o"))
    }

    fn encoder(&self, h: Tensor, block: usize, rng: &mut DropoutRng) -> Result<Tensor> {
        let a = self.attention(&instance_norm(&h)?, block, rng)?;
        let h = (h + self.dropout(a, rng)?)?;
        let f = self.linear(&instance_norm(&h)?, &format!("enc{block}.ff1"))?.gelu_erf()?;
        let f = self.dropout(f, rng)?;
        let f = self.linear(&f, &format!("enc{block}.ff2"))?;
        Ok((h + self.dropout(f, rng)?)?)
    }

    /// One multi-head graph attention layer on the complete graph (self loops
    /// included), with a residual connection.
    fn graph_attention(&self, h: Tensor) -> Result<Tensor> {
        let (b, n, d) = h.dims3()?;
        let heads = self.config.gat_heads;
        let hd = d / heads;
        let x = instance_norm(&h)?;
        let wh = x
            .reshape((b * n, d))?
            .matmul(self.params.get("gat.weight")?)?
            .reshape((b, n, heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let score = |name: &str| -> Result<Tensor> {
            let a = self.params.get(name)?.reshape((1, heads, 1, hd))?;
            Ok(wh.broadcast_mul(&a)?.sum_keepdim(D::Minus1)?)
        };
        let dst = score("gat.att_dst")?;
        let src = score("gat.att_src")?.transpose(2, 3)?;
        let e = leaky_relu(&dst.broadcast_add(&src)?, GAT_SLOPE)?;
        let alpha = softmax_last(&e)?;
        let agg = alpha.matmul(&wh)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok((h + self.linear(&agg, "gat.out")?)?)
    }

    /// Batched noise prediction.
    ///
    /// `x` is `(B, 8, 6)`, `cond` is `(B, 88)` (boundary then entrance), and
    /// `t` holds one step per sample. Returns `(B, 8, 6)`.
    pub fn forward(&self, x: &Tensor, t: &[usize], cond: &Tensor, mut rng: DropoutRng) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        if c != PLAN_COLS || t.len() != b || cond.dims() != [b, CONDITION_WIDTH] {
            return Err(Error::InvalidRequest(format!(
                "denoiser input shapes {:?}, {} steps, condition {:?}",
                x.dims(),
                t.len(),
                cond.dims()
            )));
        }
        let d = self.config.d_model;
        let times: Vec<f64> = t.iter().flat_map(|&s| time_features(s, d)).collect();
        let time = tensor_from_f64(times, &[b, 1, d], self.dtype(), self.device())?;
        let boundary = self.linear(&cond.narrow(1, 0, BOUNDARY_WIDTH)?, "embed.boundary")?;
        let entrance = self.linear(&cond.narrow(1, BOUNDARY_WIDTH, ENTRANCE_WIDTH)?, "embed.entrance")?;
        let cond_emb = (boundary + entrance)?.unsqueeze(1)?;
        let mut h = self
            .linear(x, "embed.room")?
            .broadcast_add(&cond_emb)?
            .broadcast_add(&time)?;
        if self.config.row_positions {
            h = h.broadcast_add(&self.params.get("embed.row")?.narrow(0, 0, n)?.unsqueeze(0)?)?;
        }
        debug_assert_eq!(h.dims(), [b, n, d]);
        for block in 0..self.config.n_encoders {
            h = self.encoder(h, block, &mut rng)?;
        }
        h = self.graph_attention(h)?;
        let h = self.linear(&h, "head.0")?.relu()?;
        let h = self.linear(&h, "head.1")?.relu()?;
        self.linear(&h, "head.2")
    }

    /// Packs plan matrices and conditions into input tensors.
    pub fn inputs(&self, xs: &[PlanTensor], conds: &[BoundaryCondition]) -> Result<(Tensor, Tensor)> {
        let b = xs.len();
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.flat()).collect();
        let cflat: Vec<f64> = conds.iter().flat_map(|c| c.row()).collect();
        Ok((
            tensor_from_f64(flat, &[b, MAX_ROOMS, PLAN_COLS], self.dtype(), self.device())?,
            tensor_from_f64(cflat, &[b, CONDITION_WIDTH], self.dtype(), self.device())?,
        ))
    }

    /// Inference on a batch of masked samples, dropout disabled.
    pub fn predict_batch(&self, xs: &[PlanTensor], t: &[usize], conds: &[BoundaryCondition]) -> Result<Vec<PlanTensor>> {
        if xs.len() != conds.len() {
            return Err(Error::InvalidRequest("sample and condition counts differ".into()));
        }
        if !xs.iter().all(PlanTensor::is_finite) || !conds.iter().all(|c| c.row().iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidRequest("non-finite denoiser input".into()));
        }
        let (x, c) = self.inputs(xs, conds)?;
        let out = self.forward(&x, t, &c, None)?;
        let values: Vec<f64> = out.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(values.chunks(MAX_ROOMS * PLAN_COLS).map(PlanTensor::from_flat).collect())
    }

    /// `eps_theta(M(x_t), t, c)` for one sample.
    pub fn predict_noise(&self, m_xt: &PlanTensor, t: usize, c: &BoundaryCondition) -> Result<PlanTensor> {
        Ok(self.predict_batch(std::slice::from_ref(m_xt), &[t], std::slice::from_ref(c))?.remove(0))
    }
}
