//! Caption generator: a 4-block CNN audio encoder and a Transformer text
//! decoder whose cross-attention memory is the encoder output concatenated
//! with a per-step noise vector.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Embedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corpus::{Caption, TokenId, Vocabulary, EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, N_MELS};
use crate::nn::{
    causal_mask, conv3x3, device, embedding, linear, positional_encoding, BatchNorm2d, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamStore, NEG_INF,
};

/// Time downsampling of the encoder (four 2× pools).
pub const TIME_REDUCTION: usize = 16;
/// Value used to pad shorter clips in a batch: ln(1e-10), i.e. silence.
pub const PAD_FEATURE: f32 = -23.025_85;

pub const CHECKPOINT_FORMAT: &str = "audiocap-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// A fresh noise vector at every decoding step.
    #[default]
    PerStep,
    /// One noise vector per caption, reused at every step.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output channels of the four conv blocks.
    pub channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub decoder_layers: usize,
    pub noise_dim: usize,
    pub noise_sigma: f64,
    pub noise_mode: NoiseMode,
    /// Cap on decoded sequence length, start sentinel included.
    pub max_len: usize,
    /// Optional pretrained conv-block weights (`conv_blockN.*` names).
    pub encoder_weights: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            d_model: 128,
            heads: 4,
            ff_dim: 512,
            decoder_layers: 2,
            noise_dim: 64,
            noise_sigma: 1.0,
            noise_mode: NoiseMode::PerStep,
            max_len: 30,
            encoder_weights: None,
        }
    }
}

impl GeneratorConfig {
    /// Narrow channels and width for CPU-scale runs; same block structure.
    pub fn toy() -> Self {
        Self {
            channels: vec![8, 16, 16, 32],
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            max_len: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs exactly 4 nonzero channel widths".into()));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("d_model must be a positive multiple of heads".into()));
        }
        if self.decoder_layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("decoder needs layers and a feed-forward width".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }

    /// Maximum number of tokens a decode may emit after the start sentinel.
    pub fn max_steps(&self) -> usize {
        self.max_len - 1
    }
}

/// Noise vectors `z_t` for every possible decoding step of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrace {
    steps: Vec<Vec<f32>>,
}

impl NoiseTrace {
    /// Draws `sigma · ε` with standard-normal ε. The same number of normals
    /// is consumed whatever sigma is.
    pub fn draw<R: Rng>(steps: usize, dim: usize, sigma: f64, mode: NoiseMode, rng: &mut R) -> Self {
        let mut gen = || -> Vec<f32> {
            (0..dim)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    (sigma * e) as f32
                })
                .collect()
        };
        let steps = match mode {
            NoiseMode::PerStep => (0..steps).map(|_| gen()).collect(),
            NoiseMode::Fixed => vec![gen(); steps],
        };
        Self { steps }
    }

    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self {
            steps: vec![vec![0.0; dim]; steps],
        }
    }

    pub fn from_steps(steps: Vec<Vec<f32>>) -> Self {
        Self { steps }
    }

    pub fn steps(&self) -> &[Vec<f32>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A caption drawn from the policy with its per-token log-probabilities and
/// the noise used to draw it.
#[derive(Debug, Clone)]
pub struct SampledCaption {
    pub caption: Caption,
    pub logprobs: Vec<f64>,
    pub noise: NoiseTrace,
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub caption: Caption,
    pub logprob: f64,
    /// `logprob` divided by the number of emitted tokens.
    pub score: f64,
}

struct ConvBlock {
    conv1: Tensor,
    bn1: BatchNorm2d,
    conv2: Tensor,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&conv3x3(x, &self.conv1)?, train)?.relu()?;
        let x = self.bn2.forward(&conv3x3(&x, &self.conv2)?, train)?.relu()?;
        Ok(x.max_pool2d(2)?)
    }
}

/// Four conv blocks (two 3×3 conv + BN + ReLU each, 2×2 max-pool), mean
/// over frequency, then a two-layer MLP.
pub struct AudioEncoder {
    blocks: Vec<ConvBlock>,
    fc1: Linear,
    fc2: Linear,
}

impl AudioEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            let p = format!("{prefix}.conv_block{}", i + 1);
            let conv1 = store.param(&format!("{p}.conv1.weight"), &[c, c_in, 3, 3], Init::FanIn(c_in * 9), rng)?;
            let bn1 = BatchNorm2d::new(store, &format!("{p}.bn1"), c, rng)?;
            let conv2 = store.param(&format!("{p}.conv2.weight"), &[c, c, 3, 3], Init::FanIn(c * 9), rng)?;
            let bn2 = BatchNorm2d::new(store, &format!("{p}.bn2"), c, rng)?;
            blocks.push(ConvBlock { conv1, bn1, conv2, bn2 });
            c_in = c;
        }
        Ok(Self {
            blocks,
            fc1: linear(store, &format!("{prefix}.fc1"), c_in, d_model, rng)?,
            fc2: linear(store, &format!("{prefix}.fc2"), d_model, d_model, rng)?,
        })
    }

    /// `x`: `(B, 1, frames, 64)` → `(B, frames / 16, d_model)`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let frames = x.dim(2)?;
        if frames < TIME_REDUCTION {
            return Err(Error::RejectedInput(format!(
                "{frames} frames cannot survive {TIME_REDUCTION}x time pooling"
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        let h = h.mean(3)?.transpose(1, 2)?;
        let h = self.fc1.forward(&h)?.relu()?;
        self.fc2.forward(&h)
    }
}

/// Stacks feature matrices into `(B, 1, max_frames, 64)`, padding shorter
/// clips with silence.
pub fn batch_features(features: &[&FeatureMatrix]) -> Result<Tensor> {
    let frames = features.iter().map(|f| f.frames()).max().unwrap_or(0);
    let mut data = Vec::with_capacity(features.len() * frames * N_MELS);
    for f in features {
        data.extend_from_slice(f.data());
        data.extend(std::iter::repeat_n(PAD_FEATURE, (frames - f.frames()) * N_MELS));
    }
    Ok(Tensor::from_vec(data, (features.len(), 1, frames, N_MELS), &device())?)
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff1: Linear,
    ff2: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

impl DecoderLayer {
    /// Post-norm layer. `memory` is `(B·L, S, d)`: one memory per query
    /// position because each step sees its own noise.
    fn forward(&self, x: &Tensor, memory: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let x = self.ln1.forward(&(x + self.self_attn.forward(x, x, Some(mask))?)?)?;
        let q = x.reshape((b * l, 1, d))?;
        let c = self.cross_attn.forward(&q, memory, None)?.reshape((b, l, d))?;
        let x = self.ln2.forward(&(x + c)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.relu()?)?;
        self.ln3.forward(&(x + f)?)
    }
}

struct TextDecoder {
    embed: Embedding,
    positions: Tensor,
    memory_proj: Linear,
    memory_width: usize,
    layers: Vec<DecoderLayer>,
    out: Linear,
    forbidden: Tensor,
}

impl TextDecoder {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &GeneratorConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let width = d + cfg.noise_dim;
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let p = format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, cfg.heads, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, cfg.heads, rng)?,
                ff1: linear(store, &format!("{p}.ff1"), d, cfg.ff_dim, rng)?,
                ff2: linear(store, &format!("{p}.ff2"), cfg.ff_dim, d, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d, rng)?,
            });
        }
        let mut forbid = vec![0f32; vocab];
        forbid[PAD as usize] = NEG_INF;
        forbid[SOS as usize] = NEG_INF;
        Ok(Self {
            embed: embedding(store, "decoder.embed", vocab, d, rng)?,
            positions: positional_encoding(cfg.max_len, d)?,
            memory_proj: linear(store, "decoder.memory_proj", width, d, rng)?,
            memory_width: width,
            layers,
            out: linear(store, "decoder.out", d, vocab, rng)?,
            forbidden: Tensor::from_vec(forbid, vocab, &device())?,
        })
    }

    /// `tokens`: `(B, L)`, `memory`: `(B, S, d)`, `noise`: `(B, L, noise_dim)`
    /// → logits `(B, L, V)` with pad/start ids masked out.
    fn forward(&self, tokens: &Tensor, memory: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        let (_, s, d) = memory.dims3()?;
        let nd = noise.dim(2)?;
        let x = self.embed.forward(tokens)?.broadcast_add(&self.positions.narrow(0, 0, l)?)?;
        let mem = memory.unsqueeze(1)?.broadcast_as((b, l, s, d))?;
        let z = noise.unsqueeze(2)?.broadcast_as((b, l, s, nd))?;
        let mem = Tensor::cat(&[&mem, &z], 3)?.contiguous()?;
        let mem = self.memory_proj.forward(&mem)?.reshape((b * l, s, d))?;
        let mask = causal_mask(l)?;
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(&x, &mem, &mask)?;
        }
        Ok(self.out.forward(&x)?.broadcast_add(&self.forbidden)?)
    }
}

pub struct Generator {
    config: GeneratorConfig,
    vocab_size: usize,
    store: ParamStore,
    encoder: AudioEncoder,
    decoder: TextDecoder,
}

fn noise_tensor(traces: &[&NoiseTrace], len: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(traces.len() * len * dim);
    for t in traces {
        for step in 0..len {
            match t.steps.get(step) {
                Some(z) if z.len() == dim => data.extend_from_slice(z),
                Some(z) => {
                    return Err(Error::RejectedInput(format!(
                        "noise vector has width {}, decoder expects {dim}",
                        z.len()
                    )))
                }
                None => data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
    }
    Ok(Tensor::from_vec(data, (traces.len(), len, dim), &device())?)
}

fn prefix_tensor(prefixes: &[Vec<TokenId>]) -> Result<Tensor> {
    let l = prefixes[0].len();
    let data: Vec<u32> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (prefixes.len(), l), &device())?)
}

impl Generator {
    pub fn new(config: GeneratorConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::new(&mut store, "encoder", &config.channels, config.d_model, &mut rng)?;
        let decoder = TextDecoder::new(&mut store, &config, vocab_size, &mut rng)?;
        let g = Self {
            config,
            vocab_size,
            store,
            encoder,
            decoder,
        };
        if let Some(path) = g.config.encoder_weights.clone() {
            g.load_encoder_weights(&path)?;
        }
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Width of the per-step decoder memory input: `d_model + noise_dim`.
    pub fn decoder_input_width(&self) -> usize {
        self.decoder.memory_width
    }

    /// Loads `conv_blockN.*` tensors (PANNs naming) into the conv blocks.
    pub fn load_encoder_weights(&self, path: &Path) -> Result<()> {
        let mut c = Container::load(path)?;
        c.arrays = c
            .arrays
            .into_iter()
            .map(|(k, v)| {
                let k = if k.starts_with("encoder.") { k } else { format!("encoder.{k}") };
                (k, v)
            })
            .collect();
        self.store.load_container(&c, path, Some("encoder.conv_block"))
    }

    pub fn encode(&self, features: &[&FeatureMatrix], train: bool) -> Result<Tensor> {
        self.encoder.forward(&batch_features(features)?, train)
    }

    pub fn noise_trace<R: Rng>(&self, sigma: f64, mode: NoiseMode, rng: &mut R) -> NoiseTrace {
        NoiseTrace::draw(self.config.max_steps(), self.config.noise_dim, sigma, mode, rng)
    }

    pub fn zero_noise(&self) -> NoiseTrace {
        NoiseTrace::zeros(self.config.max_steps(), self.config.noise_dim)
    }

    /// Teacher-forced logits `(B, L, V)` for the given emitted sequences
    /// (tokens after the start sentinel), L = longest sequence.
    pub fn logits(&self, memory: &Tensor, generated: &[&[TokenId]], noise: &[&NoiseTrace]) -> Result<Tensor> {
        let l = generated.iter().map(|g| g.len()).max().unwrap_or(0);
        if l == 0 || l > self.config.max_steps() {
            return Err(Error::RejectedInput(format!(
                "sequence length {l} outside 1..={}",
                self.config.max_steps()
            )));
        }
        let inputs: Vec<Vec<TokenId>> = generated
            .iter()
            .map(|g| {
                let mut v = Vec::with_capacity(l);
                v.push(SOS);
                v.extend_from_slice(&g[..g.len() - 1]);
                v.resize(l, PAD);
                v
            })
            .collect();
        let tokens = prefix_tensor(&inputs)?;
        let z = noise_tensor(noise, l, self.config.noise_dim)?;
        self.decoder.forward(&tokens, memory, &z)
    }

    /// Per-token `log π(w_t | ·)` of the given sequences, `(B, L)` in f64,
    /// zero beyond each sequence's end. Differentiable.
    pub fn token_logprobs(&self, memory: &Tensor, generated: &[&[TokenId]], noise: &[&NoiseTrace]) -> Result<Tensor> {
        let logits = self.logits(memory, generated, noise)?;
        gather_logprobs(&logits, generated)
    }

    fn step_logprobs(&self, memory: &Tensor, prefixes: &[Vec<TokenId>], noise: &[&NoiseTrace]) -> Result<Vec<Vec<f64>>> {
        let l = prefixes[0].len();
        let tokens = prefix_tensor(prefixes)?;
        let z = noise_tensor(noise, l, self.config.noise_dim)?;
        let logits = self.decoder.forward(&tokens, memory, &z)?;
        let last = logits.narrow(1, l - 1, 1)?.squeeze(1)?.to_dtype(DType::F64)?;
        Ok(candle_nn::ops::log_softmax(&last, D::Minus1)?.to_vec2::<f64>()?)
    }

    fn decode<F>(&self, memory: &Tensor, noise: &[&NoiseTrace], mut pick: F) -> Result<Vec<(Vec<TokenId>, Vec<f64>)>>
    where
        F: FnMut(&[f64]) -> TokenId,
    {
        let b = memory.dim(0)?;
        if noise.len() != b {
            return Err(Error::RejectedInput("one noise trace per clip required".into()));
        }
        let mut prefixes: Vec<Vec<TokenId>> = vec![vec![SOS]; b];
        let mut out: Vec<(Vec<TokenId>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); b];
        let mut done = vec![false; b];
        for _ in 0..self.config.max_steps() {
            let lp = self.step_logprobs(memory, &prefixes, noise)?;
            for i in 0..b {
                let tok = if done[i] {
                    PAD
                } else {
                    let t = pick(&lp[i]);
                    out[i].0.push(t);
                    out[i].1.push(lp[i][t as usize]);
                    done[i] = t == EOS;
                    t
                };
                prefixes[i].push(tok);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Multinomial sampling from the softmax until the end sentinel or the
    /// length cap, one caption per memory row.
    pub fn sample<R: Rng>(
        &self,
        memory: &Tensor,
        noise: Vec<NoiseTrace>,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<Vec<SampledCaption>> {
        let refs: Vec<&NoiseTrace> = noise.iter().collect();
        let decoded = self.decode(memory, &refs, |lp| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last_ok = 0;
            for (t, &l) in lp.iter().enumerate() {
                if l.is_finite() && l > -1e8 {
                    acc += l.exp();
                    last_ok = t;
                    if u < acc {
                        return t as TokenId;
                    }
                }
            }
            last_ok as TokenId
        })?;
        Ok(decoded
            .into_iter()
            .zip(noise)
            .map(|((toks, logprobs), noise)| SampledCaption {
                caption: Caption::from_generated(&toks, vocab),
                logprobs,
                noise,
            })
            .collect())
    }

    /// Argmax decoding under the given noise traces.
    pub fn greedy(&self, memory: &Tensor, noise: &[&NoiseTrace], vocab: &Vocabulary) -> Result<Vec<Caption>> {
        let decoded = self.decode(memory, noise, argmax)?;
        Ok(decoded
            .into_iter()
            .map(|(toks, _)| Caption::from_generated(&toks, vocab))
            .collect())
    }

    /// Beam search with zero noise over one clip's memory `(1, S, d)`.
    /// Hypotheses are ranked by log-probability per emitted token.
    pub fn beam_search(&self, memory: &Tensor, beam_size: usize, vocab: &Vocabulary) -> Result<Vec<BeamHypothesis>> {
        if beam_size == 0 {
            return Err(Error::RejectedInput("beam size must be >= 1".into()));
        }
        let zero = self.zero_noise();
        let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
        let cap = self.config.max_steps();
        for _ in 0..cap {
            if live.is_empty() {
                break;
            }
            let k = live.len();
            let prefixes: Vec<Vec<TokenId>> = live
                .iter()
                .map(|(g, _)| std::iter::once(SOS).chain(g.iter().copied()).collect())
                .collect();
            let mem = memory.broadcast_as((k, memory.dim(1)?, memory.dim(2)?))?.contiguous()?;
            let noise: Vec<&NoiseTrace> = vec![&zero; k];
            let lp = self.step_logprobs(&mem, &prefixes, &noise)?;
            let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
            for (i, row) in lp.iter().enumerate() {
                for (t, &l) in row.iter().enumerate() {
                    let t = t as TokenId;
                    if t != PAD && t != SOS {
                        cands.push((i, t, live[i].1 + l));
                    }
                }
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            cands.truncate(beam_size);
            let mut next = Vec::with_capacity(beam_size);
            for (i, t, score) in cands {
                let mut g = live[i].0.clone();
                g.push(t);
                if t == EOS || g.len() == cap {
                    finished.push((g, score));
                } else {
                    next.push((g, score));
                }
            }
            live = next;
        }
        let mut hyps: Vec<BeamHypothesis> = finished
            .into_iter()
            .map(|(g, logprob)| BeamHypothesis {
                score: logprob / g.len() as f64,
                caption: Caption::from_generated(&g, vocab),
                logprob,
            })
            .collect();
        hyps.sort_by(|a, b| b.score.total_cmp(&a.score));
        hyps.truncate(beam_size);
        Ok(hyps)
    }

    fn metadata(&self) -> Result<BTreeMap<String, String>> {
        Ok(BTreeMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("version".to_string(), CHECKPOINT_VERSION.to_string()),
            ("kind".to_string(), "generator".to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("vocab_size".to_string(), self.vocab_size.to_string()),
        ]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.to_container(self.metadata()?)?.save(path)
    }

    /// Loads a checkpoint; when `expected` is given its config must match
    /// the stored echo exactly.
    pub fn load(path: &Path, expected: Option<&GeneratorConfig>) -> Result<Self> {
        let c = Container::load(path)?;
        let (config, vocab_size): (GeneratorConfig, usize) = read_header(&c, path, "generator")?;
        if let Some(e) = expected {
            if e != &config {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: "stored generator config differs from the requested one".into(),
                });
            }
        }
        let mut cfg = config;
        cfg.encoder_weights = None;
        let mut g = Self::new(cfg, vocab_size, 0)?;
        g.store.load_container(&c, path, None)?;
        g.config = read_header::<GeneratorConfig>(&c, path, "generator")?.0;
        Ok(g)
    }
}

/// Reads `(config, vocab_size)` from a checkpoint header after checking
/// format, version and kind.
pub(crate) fn read_header<C: serde::de::DeserializeOwned>(c: &Container, path: &Path, kind: &str) -> Result<(C, usize)> {
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let get = |k: &str| c.metadata.get(k).ok_or_else(|| fail(format!("missing metadata {k}")));
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(fail("not a model checkpoint".into()));
    }
    if get("version")? != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {}", get("version")?)));
    }
    if get("kind")? != kind {
        return Err(fail(format!("expected a {kind} checkpoint, found {}", get("kind")?)));
    }
    let config = serde_json::from_str(get("config")?).map_err(|e| fail(e.to_string()))?;
    let vocab = get("vocab_size")?.parse().map_err(|_| fail("bad vocab_size".into()))?;
    Ok((config, vocab))
}

pub(crate) fn argmax(lp: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Gathers the log-softmax (f64) of each target token; positions past a
/// sequence's end are zero.
pub fn gather_logprobs(logits: &Tensor, targets: &[&[TokenId]]) -> Result<Tensor> {
    let (b, l, _) = logits.dims3()?;
    let lp = candle_nn::ops::log_softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
    let mut ids = Vec::with_capacity(b * l);
    let mut mask = Vec::with_capacity(b * l);
    for t in targets {
        for i in 0..l {
            ids.push(t.get(i).copied().unwrap_or(EOS));
            mask.push(if i < t.len() { 1f64 } else { 0.0 });
        }
    }
    let ids = Tensor::from_vec(ids, (b, l, 1), &device())?;
    let mask = Tensor::from_vec(mask, (b, l), &device())?;
    Ok((lp.gather(&ids, 2)?.squeeze(2)? * mask)?)
}

/// Token-level cross-entropy: per caption `-(1/T) Σ_t log p(y_t)` over its
/// `T` targets (end sentinel included), averaged over the batch. f64.
pub fn mle_loss(logits: &Tensor, targets: &[&[TokenId]]) -> Result<Tensor> {
    let lp = gather_logprobs(logits, targets)?;
    let lens: Vec<f64> = targets.iter().map(|t| t.len().max(1) as f64).collect();
    let lens = Tensor::from_vec(lens, targets.len(), &device())?;
    let per = lp.sum(1)?.div(&lens)?;
    Ok(per.mean(0)?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_toy_dataset, normalize_and_tokenize, Vocabulary};

    fn setup() -> (Generator, Vocabulary, Vec<crate::corpus::AudioClip>) {
        let clips = make_toy_dataset(3, 4).unwrap();
        let vocab = Vocabulary::build(&crate::corpus::all_references(&clips)).unwrap();
        let g = Generator::new(GeneratorConfig::toy(), vocab.len(), 11).unwrap();
        (g, vocab, clips)
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn encoder_downsamples_by_sixteen() {
        let (g, _, _) = setup();
        for (frames, steps) in [(85, 5), (16, 1), (64, 4), (160, 10)] {
            let f = FeatureMatrix::new(frames, vec![0.5; frames * N_MELS]).unwrap();
            let m = g.encode(&[&f], false).unwrap();
            assert_eq!(m.dims(), &[1, steps, 64]);
        }
        let short = FeatureMatrix::new(15, vec![0.0; 15 * N_MELS]).unwrap();
        assert!(g.encode(&[&short], false).is_err());
    }

    #[test]
    fn encoder_is_deterministic_in_eval() {
        let (g, _, clips) = setup();
        let a = g.encode(&[&clips[0].features], false).unwrap();
        let b = g.encode(&[&clips[0].features], false).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn mle_loss_by_hand() {
        let v = 4;
        // step 0 puts 0.5 on id 2, step 1 puts 0.25 on id 3
        let probs = [[0.1, 0.2, 0.5, 0.2], [0.25, 0.25, 0.25, 0.25]];
        let logits: Vec<f64> = probs.iter().flatten().map(|p: &f64| p.ln()).collect();
        let logits = Tensor::from_vec(logits, (1, 2, v), &device()).unwrap();
        let loss = scalar(&mle_loss(&logits, &[&[2, 3]]).unwrap());
        let expected = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-9);
        assert!((expected - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn mle_loss_uniform_and_optimum() {
        let v = 7;
        let uniform = Tensor::zeros((2, 3, v), DType::F64, &device()).unwrap();
        let loss = scalar(&mle_loss(&uniform, &[&[1, 2, 3], &[4, 5]]).unwrap());
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        let mut peaked = vec![-1e4f64; 3 * v];
        for (i, t) in [1usize, 2, 3].iter().enumerate() {
            peaked[i * v + t] = 0.0;
        }
        let peaked = Tensor::from_vec(peaked, (1, 3, v), &device()).unwrap();
        assert!(scalar(&mle_loss(&peaked, &[&[1, 2, 3]]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_logprobs_replay() {
        let (g, vocab, clips) = setup();
        let feats: Vec<_> = clips.iter().map(|c| &c.features).collect();
        let mem = g.encode(&feats, false).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = (0..4).map(|_| g.noise_trace(1.0, NoiseMode::PerStep, &mut rng)).collect();
            g.sample(&mem, noise, &vocab, &mut rng).unwrap()
        };
        let a = draw(5);
        let b = draw(5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.logprobs, y.logprobs);
        }
        let gens: Vec<&[TokenId]> = a.iter().map(|s| s.caption.generated()).collect();
        let noise: Vec<&NoiseTrace> = a.iter().map(|s| &s.noise).collect();
        let lp = g.token_logprobs(&mem, &gens, &noise).unwrap().to_vec2::<f64>().unwrap();
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.logprobs.len(), s.caption.generated().len());
            assert!(s.caption.generated().len() <= g.config().max_steps());
            for (t, &l) in s.logprobs.iter().enumerate() {
                assert!(l <= 0.0);
                assert!((lp[i][t] - l).abs() < 1e-6, "{} vs {l}", lp[i][t]);
            }
        }
    }

    #[test]
    fn noise_changes_step_distribution() {
        let (g, vocab, clips) = setup();
        assert_eq!(g.decoder_input_width(), 64 + 64);
        let mem = g.encode(&[&clips[0].features], false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z1 = g.noise_trace(1.0, NoiseMode::PerStep, &mut rng);
        let z2 = g.noise_trace(1.0, NoiseMode::PerStep, &mut rng);
        let seq = normalize_and_tokenize("a dog barks", &vocab).unwrap();
        let a = g.logits(&mem, &[seq.generated()], &[&z1]).unwrap();
        let b = g.logits(&mem, &[seq.generated()], &[&z2]).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 1e-4);
    }

    #[test]
    fn zero_sigma_matches_noise_free_model() {
        let (g, _, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(g.noise_trace(0.0, NoiseMode::PerStep, &mut rng), g.zero_noise());
    }

    #[test]
    fn fixed_noise_repeats_one_vector() {
        let (g, _, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = g.noise_trace(1.0, NoiseMode::Fixed, &mut rng);
        assert!(z.steps().windows(2).all(|w| w[0] == w[1]));
        let z = g.noise_trace(1.0, NoiseMode::PerStep, &mut rng);
        assert!(z.steps().windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn step_softmax_rows_sum_to_one() {
        let (g, _, clips) = setup();
        let mem = g.encode(&[&clips[1].features], false).unwrap();
        let z = g.zero_noise();
        let lp = g.step_logprobs(&mem, &[vec![SOS, 5, 6]], &[&z]).unwrap();
        let s: f64 = lp[0].iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn greedy_respects_length_cap() {
        let (_, vocab, clips) = setup();
        let cfg = GeneratorConfig {
            max_len: 2,
            ..GeneratorConfig::toy()
        };
        let g = Generator::new(cfg, vocab.len(), 3).unwrap();
        let mem = g.encode(&[&clips[0].features], false).unwrap();
        let z = g.zero_noise();
        let c = &g.greedy(&mem, &[&z], &vocab).unwrap()[0];
        assert_eq!(c.tokens().len(), 2);
        assert_eq!(c.tokens()[0], SOS);
    }

    #[test]
    fn beam_of_one_is_greedy_and_scores_sorted() {
        let (g, vocab, clips) = setup();
        for clip in &clips {
            let mem = g.encode(&[&clip.features], false).unwrap();
            let z = g.zero_noise();
            let greedy = g.greedy(&mem, &[&z], &vocab).unwrap().remove(0);
            let beam = g.beam_search(&mem, 1, &vocab).unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].caption, greedy);
            let five = g.beam_search(&mem, 5, &vocab).unwrap();
            assert!(five.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (g, _, clips) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.safetensors");
        g.save(&p).unwrap();
        let h = Generator::load(&p, Some(g.config())).unwrap();
        assert_eq!(g.store().checksum("").unwrap(), h.store().checksum("").unwrap());
        let a = g.encode(&[&clips[0].features], false).unwrap();
        let b = h.encode(&[&clips[0].features], false).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let other = GeneratorConfig {
            noise_dim: 8,
            ..GeneratorConfig::toy()
        };
        assert!(Generator::load(&p, Some(&other)).is_err());
    }

    #[test]
    fn encoder_weights_load_from_panns_names() {
        let (g, vocab, _) = setup();
        let donor = Generator::new(GeneratorConfig::toy(), vocab.len(), 99).unwrap();
        let mut c = donor.store().to_container(BTreeMap::new()).unwrap();
        c.arrays = c
            .arrays
            .into_iter()
            .filter(|(k, _)| k.starts_with("encoder.conv_block"))
            .map(|(k, v)| (k["encoder.".len()..].to_string(), v))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("panns.safetensors");
        c.save(&p).unwrap();
        assert_ne!(
            g.store().checksum("encoder.conv_block").unwrap(),
            donor.store().checksum("encoder.conv_block").unwrap()
        );
        g.load_encoder_weights(&p).unwrap();
        assert_eq!(
            g.store().checksum("encoder.conv_block").unwrap(),
            donor.store().checksum("encoder.conv_block").unwrap()
        );
    }
}
