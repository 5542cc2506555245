//! Layers and parameter storage shared by the generator and the
//! discriminators.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Embedding;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Array, Container};
use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Additive mask value for disallowed logits / attention positions.
pub const NEG_INF: f32 = -1e9;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    Normal(f32),
    Zeros,
    Ones,
}

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics), all `f32` on the CPU.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        if self.params.insert(name.to_string(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        Ok(t)
    }

    pub fn buffer(&mut self, name: &str, value: f32, len: usize) -> Result<Var> {
        let var = Var::from_tensor(&Tensor::full(value, len, &device())?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn trainable_excluding(&self, prefix: &str) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().chain(self.buffers.keys()).map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Hash over the exact bit patterns of every tensor whose name starts
    /// with `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, var) in self.all().filter(|(k, _)| k.starts_with(prefix)) {
            name.hash(&mut h);
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.all()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.all() {
            let t = snapshot
                .get(k)
                .ok_or_else(|| Error::Config(format!("snapshot lacks {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Copies every tensor under `src_prefix` in `other` onto the tensor of
    /// the same suffix under `dst_prefix` here.
    pub fn copy_from(&self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<()> {
        let mut copied = 0;
        for (k, v) in other.all().filter(|(k, _)| k.starts_with(src_prefix)) {
            let dst = format!("{dst_prefix}{}", &k[src_prefix.len()..]);
            let target = self
                .get(&dst)
                .ok_or_else(|| Error::Config(format!("no tensor {dst} to copy {k} into")))?;
            if target.shape() != v.shape() {
                return Err(Error::Config(format!("shape mismatch copying {k} into {dst}")));
            }
            target.set(&v.as_tensor().copy()?)?;
            copied += 1;
        }
        if copied == 0 {
            return Err(Error::Config(format!("nothing under {src_prefix} to copy")));
        }
        Ok(())
    }

    pub fn to_container(&self, metadata: BTreeMap<String, String>) -> Result<Container> {
        let mut arrays = BTreeMap::new();
        for (k, v) in self.all() {
            arrays.insert(
                k.clone(),
                Array {
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().flatten_all()?.to_vec1::<f32>()?,
                },
            );
        }
        Ok(Container { metadata, arrays })
    }

    /// Overwrites every tensor from the container; names and shapes must
    /// match exactly (tensors under `prefix` only, when given).
    pub fn load_container(&self, c: &Container, path: &Path, prefix: Option<&str>) -> Result<()> {
        let fail = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let wanted: Vec<(&String, &Var)> = self
            .all()
            .filter(|(k, _)| prefix.is_none_or(|p| k.starts_with(p)))
            .collect();
        for (k, v) in &wanted {
            let a = c.arrays.get(*k).ok_or_else(|| fail(format!("missing tensor {k}")))?;
            if a.shape != v.dims() {
                return Err(fail(format!("{k}: shape {:?} != {:?}", a.shape, v.dims())));
            }
            v.set(&Tensor::from_vec(a.data.clone(), a.shape.as_slice(), &device())?)?;
        }
        if prefix.is_none() && c.arrays.len() != wanted.len() {
            return Err(fail(format!(
                "container holds {} tensors, model has {}",
                c.arrays.len(),
                wanted.len()
            )));
        }
        Ok(())
    }
}

/// Affine layer. Inputs are made contiguous first: candle's batched matmul
/// silently mis-reads transposed 3-D inputs.
#[derive(Debug, Clone)]
pub struct Linear(candle_nn::Linear);

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self(candle_nn::Linear::new(weight, bias))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(&x.contiguous()?)?)
    }
}

pub fn linear<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Linear> {
    let w = store.param(&format!("{name}.weight"), &[d_out, d_in], Init::FanIn(d_in), rng)?;
    let b = store.param(&format!("{name}.bias"), &[d_out], Init::FanIn(d_in), rng)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn embedding<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Result<Embedding> {
    let w = store.param(&format!("{name}.weight"), &[vocab, dim], Init::Normal(1.0), rng)?;
    Ok(Embedding::new(w, dim))
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[dim], Init::Ones, rng)?,
            bias: store.param(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Spatial batch normalization over `(N, C, H, W)` with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels], Init::Ones, rng)?,
            bias: store.param(&format!("{name}.bias"), &[channels], Init::Zeros, rng)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), 0.0, channels)?,
            running_var: store.buffer(&format!("{name}.running_var"), 1.0, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.flatten_from(1)?;
            let n = flat.dim(1)? as f64;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let m = mean.flatten_all()?.detach();
            let v = var.flatten_all()?.detach();
            let unbiased = if n > 1.0 { (&v * (n / (n - 1.0)))? } else { v };
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?)?;
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Single-layer GRU (PyTorch gate layout) returning the hidden state after
/// each sequence's last valid step.
#[derive(Debug, Clone)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    hidden_size: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden_size: usize, rng: &mut R) -> Result<Self> {
        // gates stacked as [reset, update, new]
        let wi = store.param(&format!("{name}.weight_ih"), &[3 * hidden_size, d_in], Init::FanIn(hidden_size), rng)?;
        let bi = store.param(&format!("{name}.bias_ih"), &[3 * hidden_size], Init::FanIn(hidden_size), rng)?;
        let wh = store.param(&format!("{name}.weight_hh"), &[3 * hidden_size, hidden_size], Init::FanIn(hidden_size), rng)?;
        let bh = store.param(&format!("{name}.bias_hh"), &[3 * hidden_size], Init::FanIn(hidden_size), rng)?;
        Ok(Self {
            input: Linear::new(wi, Some(bi)),
            hidden: Linear::new(wh, Some(bh)),
            hidden_size,
        })
    }

    /// `xs`: `(B, L, d_in)`; `mask`: `(B, L)` with 1 for valid steps.
    pub fn final_state(&self, xs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, _) = xs.dims3()?;
        let h_sz = self.hidden_size;
        let gi_all = self.input.forward(xs)?;
        let mut h = Tensor::zeros((b, h_sz), DType::F32, xs.device())?;
        for t in 0..l {
            let gi = gi_all.narrow(1, t, 1)?.squeeze(1)?;
            let gh = self.hidden.forward(&h)?;
            let r = candle_nn::ops::sigmoid(&(gi.narrow(1, 0, h_sz)? + gh.narrow(1, 0, h_sz)?)?)?;
            let z = candle_nn::ops::sigmoid(&(gi.narrow(1, h_sz, h_sz)? + gh.narrow(1, h_sz, h_sz)?)?)?;
            let n = (gi.narrow(1, 2 * h_sz, h_sz)? + (r * gh.narrow(1, 2 * h_sz, h_sz)?)?)?.tanh()?;
            let h_new = ((z.affine(-1.0, 1.0)? * n)? + (&z * &h)?)?;
            let m = mask.narrow(1, t, 1)?;
            h = (h_new.broadcast_mul(&m)? + h.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(store, &format!("{name}.q"), dim, dim, rng)?,
            k: linear(store, &format!("{name}.k"), dim, dim, rng)?,
            v: linear(store, &format!("{name}.v"), dim, dim, rng)?,
            o: linear(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query`: `(B, Lq, d)`, `kv`: `(B, Lk, d)`, `mask`: additive `(Lq, Lk)`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(kv)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        self.o.forward(&out)
    }
}

/// 3×3 convolution, stride 1, zero padding 1, no bias. `x`: `(B, C, H, W)`,
/// `w`: `(O, C, 3, 3)`. Lowered to im2col + one matmul, whose backward is
/// far cheaper on CPU than a transposed convolution.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let o = w.dim(0)?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut cols = Vec::with_capacity(9);
    for di in 0..3 {
        for dj in 0..3 {
            cols.push(padded.narrow(2, di, h)?.narrow(3, dj, wd)?);
        }
    }
    // rows ordered (tap, channel)
    let cols = Tensor::cat(&cols, 1)?.reshape((b, 9 * c, h * wd))?;
    let w = w
        .reshape((o, c, 9))?
        .transpose(1, 2)?
        .reshape((o, 9 * c))?
        .broadcast_left(b)?
        .contiguous()?;
    Ok(w.matmul(&cols)?.reshape((b, o, h, wd))?)
}

/// `(L, L)` additive mask hiding future positions.
pub fn causal_mask(len: usize) -> Result<Tensor> {
    let data: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { NEG_INF } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), &device())?)
}

/// Fixed sinusoidal position table `(len, dim)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    let mut data = vec![0f32; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin() as f32;
            data[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), &device())?)
}

/// Pads token sequences with `pad` into a `(B, L)` u32 tensor plus a
/// `(B, L)` f32 validity mask.
pub fn pad_tokens(seqs: &[&[u32]], pad: u32) -> Result<(Tensor, Tensor)> {
    let l = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut ids = Vec::with_capacity(seqs.len() * l);
    let mut mask = Vec::with_capacity(seqs.len() * l);
    for s in seqs {
        for i in 0..l {
            ids.push(s.get(i).copied().unwrap_or(pad));
            mask.push(if i < s.len() { 1f32 } else { 0.0 });
        }
    }
    Ok((
        Tensor::from_vec(ids, (seqs.len(), l), &device())?,
        Tensor::from_vec(mask, (seqs.len(), l), &device())?,
    ))
}
