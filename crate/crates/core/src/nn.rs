//! Parameter storage and the small set of differentiable layers the encoder
//! and decoder are assembled from.
//!
//! Every layer here is written with primitive tensor ops only, so that the
//! autograd graph covers it in both `f32` and `f64`.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameter values; names and shapes must match exactly.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut problems = Vec::new();
        for name in values.keys() {
            if !self.vars.contains_key(name) {
                problems.push(format!("unexpected tensor `{name}`"));
            }
        }
        for (name, var) in &self.vars {
            match values.get(name) {
                None => problems.push(format!("missing tensor `{name}`")),
                Some(t) if t.dims() != var.dims() => problems.push(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Itemized(problems));
        }
        for (name, var) in &self.vars {
            var.set(&values[name].to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

struct BuilderState {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Creates parameters under a dotted name prefix, drawing initial values from
/// a seeded generator so that construction is reproducible.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Arc<Mutex<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        let state = BuilderState {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        };
        Self { state: Arc::new(Mutex::new(state)), prefix: String::new() }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self { state: self.state.clone(), prefix }
    }

    pub fn dtype(&self) -> DType {
        self.state.lock().unwrap().dtype
    }

    pub fn device(&self) -> Device {
        self.state.lock().unwrap().device.clone()
    }

    fn register(&self, name: &str, shape: Shape, fill: impl FnOnce(&mut ChaCha8Rng, usize) -> Vec<f64>) -> Result<Tensor> {
        let mut st = self.state.lock().unwrap();
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        if st.vars.contains_key(&full) {
            return Err(Error::Config(format!("parameter `{full}` defined twice")));
        }
        let n = shape.elem_count();
        let values = fill(&mut st.rng, n);
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        st.vars.insert(full, var);
        Ok(out)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(&self, name: &str, shape: impl Into<Shape>, std: f64) -> Result<Tensor> {
        self.register(name, shape.into(), |rng, n| {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        })
    }

    pub fn uniform(&self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        self.register(name, shape.into(), |rng, n| (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    pub fn constant(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        self.register(name, shape.into(), |_, n| vec![value; n])
    }

    pub fn zeros(&self, name: &str, shape: impl Into<Shape>) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    /// Consumes the builder state into a store. Every clone of this builder
    /// shares the same state, so any of them may finish construction.
    pub fn into_store(self) -> ParamStore {
        let st = self.state.lock().unwrap();
        ParamStore { vars: st.vars.clone(), dtype: st.dtype, device: st.device.clone() }
    }
}

/// Std of the truncated-normal init used for every linear projection.
pub const PROJ_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.trunc_normal("weight", (d_out, d_in), PROJ_INIT_STD)?;
        let bias = if bias { Some(pb.zeros("bias", d_out)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies to the trailing axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out)?)
    }
}

/// Layer normalisation over the trailing axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self { weight: pb.constant("weight", dim, 1.0)?, bias: pb.zeros("bias", dim)?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalisation over a channels-first volume `[T, C, H, W]`; the
/// whole volume is one sample, so statistics span time and space.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GroupNorm {
    /// The effective group count is `gcd(groups, channels)`.
    pub fn new(pb: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: gcd(groups.max(1), channels),
            weight: pb.constant("weight", channels, 1.0)?,
            bias: pb.zeros("bias", channels)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, c, h, w) = x.dims4()?;
        let g = self.groups;
        let grouped = x.permute((1, 0, 2, 3))?.reshape((g, (c / g) * t * h * w))?;
        let mean = grouped.mean_keepdim(1)?;
        let xc = grouped.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let xn = xn.reshape((c, t, h, w))?.permute((1, 0, 2, 3))?;
        let wgt = self.weight.reshape((1, c, 1, 1))?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        Ok(xn.broadcast_mul(&wgt)?.broadcast_add(&b)?)
    }
}

/// 2-D convolution on `[B, C, H, W]`, stride 1, "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, kernel: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = pb.trunc_normal("weight", (c_out, c_in, kernel, kernel), std)?;
        let bias = if bias { Some(pb.zeros("bias", c_out)?) } else { None };
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// 3-D convolution over a channels-first clip `[T, C, H, W]` with a 3x3x3
/// kernel, unit padding, unit spatial stride and a per-call temporal stride.
/// Evaluated as a sum of per-tap 2-D convolutions over time.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv3d {
    pub const KERNEL: usize = 3;

    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let k = Self::KERNEL;
        let std = (1.0 / (c_in * k * k * k) as f64).sqrt();
        Ok(Self {
            weight: pb.trunc_normal("weight", (c_out, c_in, k, k, k), std)?,
            bias: pb.zeros("bias", c_out)?,
        })
    }

    pub fn output_frames(frames: usize, stride: usize) -> usize {
        (frames - 1) / stride + 1
    }

    /// Smallest temporal stride taking `frames` input frames to `target` outputs.
    pub fn stride_for(frames: usize, target: usize) -> Option<usize> {
        (1..=frames.max(1)).find(|&s| Self::output_frames(frames, s) == target)
    }

    pub fn forward(&self, x: &Tensor, temporal_stride: usize) -> Result<Tensor> {
        let (t, c, h, w) = x.dims4()?;
        let t_out = Self::output_frames(t, temporal_stride);
        let zero = Tensor::zeros((1, c, h, w), x.dtype(), x.device())?;
        let padded = Tensor::cat(&[&zero, x, &zero], 0)?;
        let mut acc: Option<Tensor> = None;
        for dt in 0..Self::KERNEL {
            let idx: Vec<u32> = (0..t_out).map(|o| (o * temporal_stride + dt) as u32).collect();
            let frames = padded.index_select(&Tensor::new(idx, x.device())?, 0)?;
            let kernel = self.weight.narrow(2, dt, 1)?.squeeze(2)?.contiguous()?;
            let y = frames.conv2d(&kernel, 1, 1, 1, 1)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let c_out = self.bias.dim(0)?;
        Ok(acc.unwrap().broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&pb.pp("fc1"), dim, hidden, true)?, fc2: Linear::new(&pb.pp("fc2"), hidden, dim, true)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head self-attention over `[B, N, C]` token groups with an optional
/// additive mask `[B, N, N]` broadcast over heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let q = (q * (1.0 / (hd as f64).sqrt()))?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(&m.unsqueeze(1)?)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.permute((0, 2, 1, 3))?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    /// Value path alone: the attention output when every token only attends
    /// to itself.
    pub fn value_path(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.dims().last().unwrap();
        let v = self.qkv.forward(x)?.narrow(D::Minus1, 2 * c, c)?;
        self.proj.forward(&v)
    }
}

/// How a feature volume's time axis is reduced to a single slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapseKind {
    /// Softmax-weighted sum over time with a learned query.
    Attention,
    /// Plain average over time.
    Mean,
}

/// Temporal collapse of a channels-last volume `[T, h, w, C]` to `[1, h, w, C]`.
#[derive(Debug, Clone)]
pub struct TemporalCollapse {
    query: Option<Tensor>,
}

impl TemporalCollapse {
    pub fn new(pb: &ParamBuilder, kind: CollapseKind, channels: usize) -> Result<Self> {
        let query = match kind {
            CollapseKind::Attention => Some(pb.trunc_normal("query", (channels, 1), PROJ_INIT_STD)?),
            CollapseKind::Mean => None,
        };
        Ok(Self { query })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.query {
            None => Ok(x.mean_keepdim(0)?),
            Some(q) => {
                let (t, h, w, c) = x.dims4()?;
                let scores = x.reshape((t * h * w, c))?.matmul(q)?.reshape((t, h, w, 1))?;
                let weights = candle_nn::ops::softmax(&scores, 0)?;
                Ok(x.broadcast_mul(&weights)?.sum_keepdim(0)?)
            }
        }
    }
}

/// Logistic function written through `tanh` so that neither pass overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Fails with [`Error::NonFinite`] when `x` holds a NaN or infinity.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let probe = x.flatten_all()?.to_dtype(DType::F64)?;
    // `v - v` is 0 for finite `v` and NaN otherwise, so the sum cannot overflow.
    #[allow(clippy::eq_op)]
    let s = (&probe - &probe)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Channels-last `[T, h, w, C]` to channels-first `[T, C, h, w]`.
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Channels-first `[T, C, h, w]` to channels-last `[T, h, w, C]`.
pub fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}
