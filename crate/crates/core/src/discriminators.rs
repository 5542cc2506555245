//! Naturalness discriminator D_N (GRU over tokens → probability) and
//! semantic discriminator D_S (frozen audio encoder + GRU caption encoder,
//! scored by a ReLU-clamped cosine in a shared space), with their losses.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Module, Tensor, Var};
use candle_nn::Embedding;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corpus::{Caption, TokenId, PAD};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::generator::{batch_features, read_header, AudioEncoder, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::nn::{device, embedding, linear, pad_tokens, Gru, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticLossKind {
    /// Squared error against targets 1 (paired) and 0 (negatives).
    #[default]
    Mse,
    /// Binary cross-entropy with the same targets and weights.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Width of the shared audio/caption space of D_S.
    pub shared_dim: usize,
    pub semantic_loss: SemanticLossKind,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            hidden: 256,
            shared_dim: 256,
            semantic_loss: SemanticLossKind::Mse,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            hidden: 64,
            shared_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.shared_dim == 0 {
            return Err(Error::Config("discriminator widths must be nonzero".into()));
        }
        Ok(())
    }
}

fn caption_batch(captions: &[&Caption]) -> Result<(Tensor, Tensor)> {
    let seqs: Vec<&[TokenId]> = captions.iter().map(|c| c.generated()).collect();
    pad_tokens(&seqs, PAD)
}

struct CaptionEncoder {
    embed: Embedding,
    gru: Gru,
}

impl CaptionEncoder {
    fn new(store: &mut ParamStore, cfg: &DiscriminatorConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            embed: embedding(store, "embed", vocab, cfg.embed_dim, rng)?,
            gru: Gru::new(store, "gru", cfg.embed_dim, cfg.hidden, rng)?,
        })
    }

    fn forward(&self, captions: &[&Caption]) -> Result<Tensor> {
        let (ids, mask) = caption_batch(captions)?;
        self.gru.final_state(&self.embed.forward(&ids)?, &mask)
    }
}

fn save_store(store: &ParamStore, path: &Path, kind: &str, config: String, vocab: usize) -> Result<()> {
    let meta = BTreeMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), config),
        ("vocab_size".to_string(), vocab.to_string()),
    ]);
    store.to_container(meta)?.save(path)
}

pub struct NaturalnessDiscriminator {
    config: DiscriminatorConfig,
    vocab_size: usize,
    store: ParamStore,
    text: CaptionEncoder,
    head: Linear,
}

impl NaturalnessDiscriminator {
    pub fn new(config: DiscriminatorConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = CaptionEncoder::new(&mut store, &config, vocab_size, &mut rng)?;
        let head = linear(&mut store, "head", config.hidden, 1, &mut rng)?;
        Ok(Self {
            config,
            vocab_size,
            store,
            text,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable()
    }

    /// D_N for each caption, `(N,)`.
    pub fn forward(&self, captions: &[&Caption]) -> Result<Tensor> {
        let h = self.text.forward(captions)?;
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&h)?.squeeze(1)?)?)
    }

    pub fn scores(&self, captions: &[&Caption]) -> Result<Vec<f64>> {
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.forward(captions)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(&self.store, path, "naturalness", serde_json::to_string(&self.config)?, self.vocab_size)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let (config, vocab) = read_header(&c, path, "naturalness")?;
        let d = Self::new(config, vocab, 0)?;
        d.store.load_container(&c, path, None)?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SemanticHeader {
    disc: DiscriminatorConfig,
    channels: Vec<usize>,
    audio_dim: usize,
}

/// Parameter-name prefix of the frozen audio branch.
pub const FROZEN_PREFIX: &str = "audio_encoder.";

pub struct SemanticDiscriminator {
    header: SemanticHeader,
    vocab_size: usize,
    store: ParamStore,
    audio: AudioEncoder,
    audio_head: (Linear, Linear),
    text: CaptionEncoder,
    text_head: (Linear, Linear),
}

impl SemanticDiscriminator {
    /// `channels` / `audio_dim` describe the audio encoder, which must
    /// match the generator's so its weights can be copied in.
    pub fn new(config: DiscriminatorConfig, channels: &[usize], audio_dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let audio = AudioEncoder::new(&mut store, "audio_encoder", channels, audio_dim, &mut rng)?;
        let k = config.shared_dim;
        let audio_head = (
            linear(&mut store, "audio_head.fc1", audio_dim, k, &mut rng)?,
            linear(&mut store, "audio_head.fc2", k, k, &mut rng)?,
        );
        let text = CaptionEncoder::new(&mut store, &config, vocab_size, &mut rng)?;
        let text_head = (
            linear(&mut store, "text_head.fc1", config.hidden, k, &mut rng)?,
            linear(&mut store, "text_head.fc2", k, k, &mut rng)?,
        );
        Ok(Self {
            header: SemanticHeader {
                disc: config,
                channels: channels.to_vec(),
                audio_dim,
            },
            vocab_size,
            store,
            audio,
            audio_head,
            text,
            text_head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.header.disc
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Everything except the frozen audio encoder.
    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable_excluding(FROZEN_PREFIX)
    }

    /// Copies the generator's audio encoder (`encoder.*`) into the frozen
    /// audio branch.
    pub fn load_audio_encoder(&self, generator_store: &ParamStore) -> Result<()> {
        self.store.copy_from(generator_store, "encoder.", FROZEN_PREFIX)
    }

    pub fn audio_checksum(&self) -> Result<u64> {
        self.store.checksum(FROZEN_PREFIX)
    }

    /// Frozen audio representation: encoder output averaged over time,
    /// `(B, audio_dim)`, detached.
    pub fn encode_audio(&self, features: &[&FeatureMatrix]) -> Result<Tensor> {
        let h = self.audio.forward(&batch_features(features)?, false)?;
        Ok(h.mean(1)?.detach())
    }

    fn project(head: &(Linear, Linear), x: &Tensor) -> Result<Tensor> {
        head.1.forward(&head.0.forward(x)?.relu()?)
    }

    fn cosine(&self, audio: &Tensor, captions: &[&Caption]) -> Result<Tensor> {
        let a = Self::project(&self.audio_head, audio)?;
        let c = Self::project(&self.text_head, &self.text.forward(captions)?)?;
        cosine(&a, &c)
    }

    /// D_S for row-aligned `(audio[i], captions[i])` pairs, `(N,)`.
    pub fn forward(&self, audio: &Tensor, captions: &[&Caption]) -> Result<Tensor> {
        Ok(self.cosine(audio, captions)?.relu()?.clamp(0f32, 1f32)?)
    }

    /// Training-time D_S: negative cosines are scaled by
    /// [`DEAD_ZONE_SLOPE`] instead of clamped to 0. Freshly initialized
    /// heads can put every pair below zero at once, where the plain clamp
    /// passes no gradient and the discriminator never starts learning.
    pub fn forward_train(&self, audio: &Tensor, captions: &[&Caption]) -> Result<Tensor> {
        let cos = self.cosine(audio, captions)?;
        Ok((cos.relu()? - (cos.neg()?.relu()? * DEAD_ZONE_SLOPE)?)?)
    }

    pub fn scores(&self, audio: &Tensor, captions: &[&Caption]) -> Result<Vec<f64>> {
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.forward(audio, captions)?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(&self.store, path, "semantic", serde_json::to_string(&self.header)?, self.vocab_size)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let (h, vocab): (SemanticHeader, usize) = read_header(&c, path, "semantic")?;
        let d = Self::new(h.disc, &h.channels, h.audio_dim, vocab, 0)?;
        d.store.load_container(&c, path, None)?;
        Ok(d)
    }
}

/// Slope below zero of the training-time D_S clamp.
pub const DEAD_ZONE_SLOPE: f64 = 0.01;

fn cosine(a: &Tensor, c: &Tensor) -> Result<Tensor> {
    let dot = (a * c)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nc = c.sqr()?.sum(1)?.sqrt()?;
    let denom = (na * nc)?.clamp(1e-8f32, f32::MAX)?;
    Ok(dot.div(&denom)?)
}

/// `max(0, cos(a_i, c_i))` row-wise for `(N, k)` inputs.
pub fn clamped_cosine(a: &Tensor, c: &Tensor) -> Result<Tensor> {
    Ok(cosine(a, c)?.relu()?.clamp(0f32, 1f32)?)
}

const PROB_EPS: f64 = 1e-12;

fn mean_f64(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?.mean(0)?)
}

fn log_clamped(p: &Tensor) -> Result<Tensor> {
    Ok(p.to_dtype(DType::F64)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?)
}

/// Binary cross-entropy of D_N: `−E_real log D − E_fake log(1 − D)`.
pub fn naturalness_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.elem_count() == 0 || fake.elem_count() == 0 {
        return Err(Error::RejectedInput("naturalness loss needs real and fake captions".into()));
    }
    let r = log_clamped(real)?.mean(0)?;
    let f = log_clamped(&fake.to_dtype(DType::F64)?.affine(-1.0, 1.0)?)?.mean(0)?;
    Ok((r + f)?.neg()?)
}

/// Semantic loss over paired (target 1), unpaired and generated (target 0)
/// scores; negatives weighted 0.5. Empty negative pools are omitted.
pub fn semantic_loss(paired: &Tensor, unpaired: &Tensor, generated: &Tensor, kind: SemanticLossKind) -> Result<Tensor> {
    if paired.elem_count() == 0 {
        return Err(Error::RejectedInput("semantic loss needs paired captions".into()));
    }
    let pos = match kind {
        SemanticLossKind::Mse => mean_f64(&paired.to_dtype(DType::F64)?.affine(-1.0, 1.0)?.sqr()?)?,
        SemanticLossKind::CrossEntropy => log_clamped(paired)?.mean(0)?.neg()?,
    };
    let mut loss = pos;
    for neg in [unpaired, generated] {
        if neg.elem_count() == 0 {
            continue;
        }
        let term = match kind {
            SemanticLossKind::Mse => mean_f64(&neg.to_dtype(DType::F64)?.sqr()?)?,
            SemanticLossKind::CrossEntropy => log_clamped(&neg.to_dtype(DType::F64)?.affine(-1.0, 1.0)?)?
                .mean(0)?
                .neg()?,
        };
        loss = (loss + (term * 0.5)?)?;
    }
    Ok(loss)
}

/// Real-vs-fake accuracy of probability scores at threshold 0.5.
pub fn threshold_accuracy(real: &[f64], fake: &[f64]) -> f64 {
    let hits = real.iter().filter(|&&s| s > 0.5).count() + fake.iter().filter(|&&s| s < 0.5).count();
    hits as f64 / (real.len() + fake.len()).max(1) as f64
}

pub fn empty_scores() -> Result<Tensor> {
    Ok(Tensor::zeros(0, DType::F32, &device())?)
}
