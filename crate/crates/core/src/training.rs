//! The three training phases: MLE pretraining of the generator,
//! discriminator pretraining, and the alternating adversarial loop with
//! self-critical policy-gradient generator updates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_and_tokenize, sample_unpaired, AudioClip, Caption, TokenId, Vocabulary, REFS_PER_CLIP};
use crate::discriminators::{naturalness_loss, semantic_loss, NaturalnessDiscriminator, SemanticDiscriminator};
use crate::error::{Error, Result};
use crate::features::{spec_augment, AugmentParams, FeatureMatrix};
use crate::generator::{mle_loss, Generator, NoiseMode, NoiseTrace, SampledCaption};
use crate::metrics::{cider, IdfTable};
use crate::nn::device;

/// Which reward components are active. Serialized as `"nd,sd,le"` subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComponentMask {
    pub naturalness: bool,
    pub semantic: bool,
    pub evaluator: bool,
}

impl ComponentMask {
    pub const ALL: Self = Self {
        naturalness: true,
        semantic: true,
        evaluator: true,
    };
    pub const ND_ONLY: Self = Self {
        naturalness: true,
        semantic: false,
        evaluator: false,
    };
    pub const SD_ONLY: Self = Self {
        naturalness: false,
        semantic: true,
        evaluator: false,
    };
    pub const LE_ONLY: Self = Self {
        naturalness: false,
        semantic: false,
        evaluator: true,
    };

    pub fn any_discriminator(&self) -> bool {
        self.naturalness || self.semantic
    }
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.naturalness, "nd"), (self.semantic, "sd"), (self.evaluator, "le")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    /// Comma-separated subset of `nd`, `sd`, `le`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = Self {
            naturalness: false,
            semantic: false,
            evaluator: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "nd" => m.naturalness = true,
                "sd" => m.semantic = true,
                "le" => m.evaluator = true,
                other => return Err(Error::Config(format!("unknown component {other:?} (use nd, sd, le)"))),
            }
        }
        if !(m.naturalness || m.semantic || m.evaluator) {
            return Err(Error::Config("at least one reward component is required".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sigma: f64,
    /// Noise scale during MLE pretraining; `None` follows `sigma`.
    pub mle_sigma: Option<f64>,
    pub lambda: f64,
    pub batch_size: usize,
    /// Generator learning rate during MLE pretraining.
    pub learning_rate: f64,
    /// Generator learning rate during adversarial training.
    pub adv_learning_rate: f64,
    /// Learning rate of both discriminators, in both phases.
    pub disc_learning_rate: f64,
    pub mle_epochs: usize,
    pub disc_pretrain_epochs: usize,
    pub adv_epochs: usize,
    pub noise_mode: NoiseMode,
    pub components: ComponentMask,
    /// Unpaired human captions per clip per step.
    pub unpaired_per_clip: usize,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            mle_sigma: None,
            lambda: 1.0,
            batch_size: 32,
            learning_rate: 1e-4,
            adv_learning_rate: 1e-4,
            disc_learning_rate: 1e-4,
            mle_epochs: 15,
            disc_pretrain_epochs: 3,
            adv_epochs: 25,
            noise_mode: NoiseMode::PerStep,
            components: ComponentMask::ALL,
            unpaired_per_clip: 1,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the synthetic toy corpus: small batches and
    /// larger steps so every phase converges in seconds to minutes.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            adv_learning_rate: 1e-4,
            disc_learning_rate: 3e-3,
            mle_epochs: 40,
            disc_pretrain_epochs: 3,
            adv_epochs: 50,
            augment: AugmentParams::disabled(),
            ..Self::default()
        }
    }

    pub fn effective_mle_sigma(&self) -> f64 {
        self.mle_sigma.unwrap_or(self.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        for (name, v) in [("sigma", self.sigma), ("mle_sigma", self.effective_mle_sigma())] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (unpaired sampling)".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adv_learning_rate", self.adv_learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.unpaired_per_clip == 0 {
            return Err(Error::Config("unpaired_per_clip must be >= 1".into()));
        }
        Ok(())
    }
}

/// Independent stream per training phase, all derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init = 1,
    Mle = 2,
    Discriminators = 3,
    Adversarial = 4,
    Generate = 5,
    Validation = 6,
}

pub fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase as u64);
    rng
}

fn optimizer(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Per-epoch JSON Lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<RewardMeans>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub val: BTreeMap<String, f64>,
}

/// Batches of clip indices in a seeded shuffle; a trailing single clip is
/// folded into the previous batch so every batch has at least two clips.
fn batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Emitted tokens of a reference (content + end sentinel), truncated to
/// what the generator can emit.
fn target(caption: &Caption, max_steps: usize) -> Vec<TokenId> {
    let g = caption.generated();
    g[..g.len().min(max_steps)].to_vec()
}

fn draw_traces<R: Rng>(gen: &Generator, n: usize, sigma: f64, mode: NoiseMode, rng: &mut R) -> Vec<NoiseTrace> {
    (0..n).map(|_| gen.noise_trace(sigma, mode, rng)).collect()
}

/// Teacher-forced MLE pretraining: each epoch visits every clip once with
/// one uniformly chosen reference. Returns one log record per epoch.
pub fn pretrain_generator(
    gen: &Generator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut rng = phase_rng(cfg.seed, Phase::Mle);
    let refs: Vec<Vec<Caption>> = clips
        .iter()
        .map(|c| c.tokenized_references(vocab))
        .collect::<Result<_>>()?;
    let mut opt = optimizer(gen.store().trainable(), cfg.learning_rate)?;
    let max_steps = gen.config().max_steps();
    let mut logs = Vec::with_capacity(cfg.mle_epochs);
    for epoch in 1..=cfg.mle_epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches(clips.len(), cfg.batch_size, &mut rng) {
            let feats: Vec<FeatureMatrix> = batch
                .iter()
                .map(|&i| spec_augment(&clips[i].features, &cfg.augment, &mut rng))
                .collect();
            let targets: Vec<Vec<TokenId>> = batch
                .iter()
                .map(|&i| {
                    let r = rng.random_range(0..refs[i].len());
                    target(&refs[i][r], max_steps)
                })
                .collect();
            let traces = draw_traces(gen, batch.len(), cfg.effective_mle_sigma(), cfg.noise_mode, &mut rng);
            let feat_refs: Vec<&FeatureMatrix> = feats.iter().collect();
            let memory = gen.encode(&feat_refs, true)?;
            let t: Vec<&[TokenId]> = targets.iter().map(Vec::as_slice).collect();
            let z: Vec<&NoiseTrace> = traces.iter().collect();
            let loss = mle_loss(&gen.logits(&memory, &t, &z)?, &t)?;
            opt.backward_step(&loss)?;
            total += loss.to_scalar::<f64>()? * batch.len() as f64;
            count += batch.len();
        }
        let log = EpochLog {
            epoch,
            phase: "mle".into(),
            losses: BTreeMap::from([("ce".to_string(), total / count.max(1) as f64)]),
            mean_reward: None,
            val: BTreeMap::new(),
        };
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean teacher-forced cross-entropy over every reference of every clip
/// (eval mode, noise per `sigma`).
pub fn reference_cross_entropy<R: Rng>(
    gen: &Generator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    sigma: f64,
    rng: &mut R,
) -> Result<f64> {
    let max_steps = gen.config().max_steps();
    let (mut total, mut n) = (0.0, 0usize);
    for clip in clips {
        let memory = gen.encode(&[&clip.features], false)?;
        for r in clip.tokenized_references(vocab)? {
            let t = target(&r, max_steps);
            let z = gen.noise_trace(sigma, gen.config().noise_mode, rng);
            let loss = mle_loss(&gen.logits(&memory, &[&t], &[&z])?, &[&t])?;
            total += loss.to_scalar::<f64>()?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

fn tokenize_all(texts: &[&str], vocab: &Vocabulary) -> Result<Vec<Caption>> {
    texts.iter().map(|t| normalize_and_tokenize(t, vocab)).collect()
}

/// Discriminator pretraining. The semantic audio branch is first copied
/// from the generator's encoder. One epoch presents every human caption
/// once (five rounds over the clips, one reference slot each); D_N's
/// negatives are resampled from the generator every epoch, one per slot,
/// and D_S sees paired and unpaired human captions only.
pub fn pretrain_discriminators(
    gen: &Generator,
    dn: &NaturalnessDiscriminator,
    ds: &SemanticDiscriminator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    ds.load_audio_encoder(gen.store())?;
    if cfg.disc_pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    let mut rng = phase_rng(cfg.seed, Phase::Discriminators);
    let refs: Vec<Vec<Caption>> = clips
        .iter()
        .map(|c| c.tokenized_references(vocab))
        .collect::<Result<_>>()?;
    let feats: Vec<&FeatureMatrix> = clips.iter().map(|c| &c.features).collect();
    let audio_all = ds.encode_audio(&feats)?;
    let mut opt_n = optimizer(dn.trainable(), cfg.disc_learning_rate)?;
    let mut opt_s = optimizer(ds.trainable(), cfg.disc_learning_rate)?;
    let mut logs = Vec::with_capacity(cfg.disc_pretrain_epochs);
    for epoch in 1..=cfg.disc_pretrain_epochs {
        // fresh C_g every epoch: a fixed pool is memorized rather than
        // teaching what makes a caption unnatural
        let generated: Vec<Vec<Caption>> = (0..REFS_PER_CLIP)
            .map(|_| sample_captions(gen, clips, vocab, cfg, &mut rng))
            .collect::<Result<_>>()?;
        let (mut ln, mut ls, mut count) = (0.0, 0.0, 0usize);
        let slots: Vec<Vec<usize>> = clips
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..REFS_PER_CLIP).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        for round in 0..REFS_PER_CLIP {
            for batch in batches(clips.len(), cfg.batch_size, &mut rng) {
                let members: Vec<&AudioClip> = batch.iter().map(|&i| &clips[i]).collect();
                let paired: Vec<&Caption> = batch.iter().map(|&i| &refs[i][slots[i][round]]).collect();
                let fake: Vec<&Caption> = batch.iter().map(|&i| &generated[round][i]).collect();
                let loss_n = naturalness_loss(&dn.forward(&paired)?, &dn.forward(&fake)?)?;
                opt_n.backward_step(&loss_n)?;

                let unpaired = unpaired_captions(&members, cfg.unpaired_per_clip, vocab, &mut rng)?;
                let idx = Tensor::from_vec(batch.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch.len(), &device())?;
                let audio = audio_all.index_select(&idx, 0)?;
                let loss_s = semantic_step_loss(ds, &audio, &paired, &unpaired, None, cfg.unpaired_per_clip)?;
                opt_s.backward_step(&loss_s)?;

                ln += loss_n.to_scalar::<f64>()? * batch.len() as f64;
                ls += loss_s.to_scalar::<f64>()? * batch.len() as f64;
                count += batch.len();
            }
        }
        let log = EpochLog {
            epoch,
            phase: "disc".into(),
            losses: BTreeMap::from([
                ("naturalness".to_string(), ln / count as f64),
                ("semantic".to_string(), ls / count as f64),
            ]),
            mean_reward: None,
            val: BTreeMap::new(),
        };
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// One multinomial sample per clip (eval mode, noise per config).
pub fn sample_captions<R: Rng>(
    gen: &Generator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<Caption>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(cfg.batch_size) {
        let feats: Vec<&FeatureMatrix> = chunk.iter().map(|c| &c.features).collect();
        let memory = gen.encode(&feats, false)?;
        let traces = draw_traces(gen, chunk.len(), cfg.sigma, cfg.noise_mode, rng);
        out.extend(gen.sample(&memory, traces, vocab, rng)?.into_iter().map(|s| s.caption));
    }
    Ok(out)
}

/// Unpaired captions, flattened clip-major (`count` per clip).
fn unpaired_captions<R: Rng>(
    members: &[&AudioClip],
    count: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<Caption>> {
    let map = sample_unpaired(members, count, rng)?;
    let mut out = Vec::with_capacity(members.len() * count);
    for c in members {
        for u in &map[&c.clip_id] {
            out.push(normalize_and_tokenize(&u.text, vocab)?);
        }
    }
    Ok(out)
}

fn semantic_step_loss(
    ds: &SemanticDiscriminator,
    audio: &Tensor,
    paired: &[&Caption],
    unpaired: &[Caption],
    generated: Option<&[&Caption]>,
    per_clip: usize,
) -> Result<Tensor> {
    let p = ds.forward_train(audio, paired)?;
    let rows: Vec<u32> = (0..paired.len() as u32)
        .flat_map(|i| std::iter::repeat_n(i, per_clip))
        .collect();
    let idx = Tensor::from_vec(rows, paired.len() * per_clip, &device())?;
    let u_refs: Vec<&Caption> = unpaired.iter().collect();
    let u = ds.forward_train(&audio.index_select(&idx, 0)?, &u_refs)?;
    let g = match generated {
        Some(g) => ds.forward_train(audio, g)?,
        None => Tensor::zeros(0, DType::F32, &device())?,
    };
    semantic_loss(&p, &u, &g, ds.config().semantic_loss)
}

/// Raw reward components of one caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RewardParts {
    pub d_n: f64,
    pub d_s: f64,
    pub l_e: f64,
}

impl TryFrom<String> for ComponentMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ComponentMask> for String {
    fn from(m: ComponentMask) -> Self {
        m.to_string()
    }
}

/// `λ·(D_N + D_S) + (1 − λ)·L_E` with masked components zeroed; λ is forced
/// to 1 when the evaluator is masked and to 0 when both discriminators are.
pub fn combine_reward(parts: &RewardParts, lambda: f64, mask: ComponentMask) -> f64 {
    let lambda = effective_lambda(lambda, mask);
    let d_n = if mask.naturalness { parts.d_n } else { 0.0 };
    let d_s = if mask.semantic { parts.d_s } else { 0.0 };
    let l_e = if mask.evaluator { parts.l_e } else { 0.0 };
    lambda * (d_n + d_s) + (1.0 - lambda) * l_e
}

pub fn effective_lambda(lambda: f64, mask: ComponentMask) -> f64 {
    if !mask.evaluator {
        1.0
    } else if !mask.any_discriminator() {
        0.0
    } else {
        lambda
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub d_n: f64,
    pub d_s: f64,
    pub l_e: f64,
    pub combined: f64,
    pub baseline: f64,
    pub advantage: f64,
}

/// Reward of a sampled caption against its greedy baseline.
pub fn compute_reward(
    sample: &RewardParts,
    baseline: &RewardParts,
    lambda: f64,
    mask: ComponentMask,
) -> RewardBreakdown {
    let combined = combine_reward(sample, lambda, mask);
    let base = combine_reward(baseline, lambda, mask);
    RewardBreakdown {
        d_n: if mask.naturalness { sample.d_n } else { 0.0 },
        d_s: if mask.semantic { sample.d_s } else { 0.0 },
        l_e: if mask.evaluator { sample.l_e } else { 0.0 },
        combined,
        baseline: base,
        advantage: combined - base,
    }
}

/// Scores captions row-aligned with `audio` / `references`; masked
/// components are not evaluated and stay 0.
pub struct RewardScorer<'a> {
    pub dn: &'a NaturalnessDiscriminator,
    pub ds: &'a SemanticDiscriminator,
    pub idf: &'a IdfTable,
    pub mask: ComponentMask,
}

impl RewardScorer<'_> {
    pub fn score(&self, audio: &Tensor, captions: &[&Caption], references: &[&[String]]) -> Result<Vec<RewardParts>> {
        let n = captions.len();
        let d_n = if self.mask.naturalness { self.dn.scores(captions)? } else { vec![0.0; n] };
        let d_s = if self.mask.semantic { self.ds.scores(audio, captions)? } else { vec![0.0; n] };
        let l_e: Vec<f64> = if self.mask.evaluator {
            captions
                .iter()
                .zip(references)
                .map(|(c, refs)| {
                    let r: Vec<&str> = refs.iter().map(String::as_str).collect();
                    cider(c.text(), &r, self.idf)
                })
                .collect()
        } else {
            vec![0.0; n]
        };
        Ok((0..n)
            .map(|i| RewardParts {
                d_n: d_n[i],
                d_s: d_s[i],
                l_e: l_e[i],
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScstStats {
    pub loss: f64,
    /// False when every advantage was exactly zero and no step was taken.
    pub applied: bool,
}

/// Self-critical policy-gradient step:
/// `loss = −mean_b[(r(c_b) − r(ĉ_b)) · Σ_t log π(w_t)]`, teacher-forced
/// under each sample's own noise. With all advantages zero the optimizer is
/// not stepped, so parameters stay bitwise unchanged.
pub fn scst_update(
    gen: &Generator,
    opt: &mut AdamW,
    features: &[&FeatureMatrix],
    samples: &[SampledCaption],
    advantages: &[f64],
) -> Result<ScstStats> {
    if samples.len() != features.len() || advantages.len() != samples.len() {
        return Err(Error::RejectedInput("one sample and advantage per clip required".into()));
    }
    if advantages.iter().all(|&a| a == 0.0) {
        return Ok(ScstStats {
            loss: 0.0,
            applied: false,
        });
    }
    let memory = gen.encode(features, false)?;
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.caption.generated()).collect();
    let noise: Vec<&NoiseTrace> = samples.iter().map(|s| &s.noise).collect();
    let lp = gen.token_logprobs(&memory, &seqs, &noise)?.sum(1)?;
    let adv = Tensor::from_vec(advantages.to_vec(), advantages.len(), &device())?;
    let loss = (lp * adv)?.mean(0)?.neg()?;
    opt.backward_step(&loss)?;
    Ok(ScstStats {
        loss: loss.to_scalar::<f64>()?,
        applied: true,
    })
}

pub fn generator_optimizer(gen: &Generator, lr: f64) -> Result<AdamW> {
    optimizer(gen.store().trainable(), lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RewardMeans {
    pub d_n: f64,
    pub d_s: f64,
    pub l_e: f64,
    pub combined: f64,
    pub baseline: f64,
    pub advantage: f64,
}

impl RewardMeans {
    fn from(rs: &[RewardBreakdown]) -> Self {
        let n = rs.len().max(1) as f64;
        let mut m = Self::default();
        for r in rs {
            m.d_n += r.d_n / n;
            m.d_s += r.d_s / n;
            m.l_e += r.l_e / n;
            m.combined += r.combined / n;
            m.baseline += r.baseline / n;
            m.advantage += r.advantage / n;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCounters {
    pub iterations: usize,
    pub naturalness_steps: usize,
    pub semantic_steps: usize,
    pub generator_steps: usize,
}

pub struct AdversarialOutcome {
    pub logs: Vec<EpochLog>,
    pub counters: StepCounters,
    /// Epoch (1-based) with the best validation CIDEr, if any epoch ran.
    pub best_epoch: Option<usize>,
    /// Generator parameters at `best_epoch`.
    pub best_snapshot: Option<BTreeMap<String, Tensor>>,
}

/// Mean CIDEr of zero-noise greedy captions against all references, idf
/// from the evaluated clips.
pub fn validation_cider(gen: &Generator, clips: &[AudioClip], vocab: &Vocabulary, batch_size: usize) -> Result<f64> {
    if clips.is_empty() {
        return Ok(0.0);
    }
    let sets: Vec<Vec<String>> = clips.iter().map(|c| c.references.clone()).collect();
    let idf = IdfTable::from_reference_sets(&sets);
    let zero = gen.zero_noise();
    let mut total = 0.0;
    for chunk in clips.chunks(batch_size.max(1)) {
        let feats: Vec<&FeatureMatrix> = chunk.iter().map(|c| &c.features).collect();
        let memory = gen.encode(&feats, false)?;
        let caps = gen.greedy(&memory, &vec![&zero; chunk.len()], vocab)?;
        for (c, clip) in caps.iter().zip(chunk) {
            let refs: Vec<&str> = clip.references.iter().map(String::as_str).collect();
            total += cider(c.text(), &refs, &idf);
        }
    }
    Ok(total / clips.len() as f64)
}

/// Alternating adversarial training. Per mini-batch: sample C_g (which is
/// also the policy sample c) and C_u; one step of each enabled
/// discriminator; score c and the same-noise greedy baseline ĉ; one SCST
/// generator step.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial(
    gen: &Generator,
    dn: &NaturalnessDiscriminator,
    ds: &SemanticDiscriminator,
    train: &[AudioClip],
    validation: &[AudioClip],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    let mut rng = phase_rng(cfg.seed, Phase::Adversarial);
    let sets: Vec<Vec<String>> = train.iter().map(|c| c.references.clone()).collect();
    let idf = IdfTable::from_reference_sets(&sets);
    let mask = cfg.components;
    let mut opt_g = generator_optimizer(gen, cfg.adv_learning_rate)?;
    let mut opt_n = optimizer(dn.trainable(), cfg.disc_learning_rate)?;
    let mut opt_s = optimizer(ds.trainable(), cfg.disc_learning_rate)?;
    let frozen = ds.audio_checksum()?;
    let scorer = RewardScorer {
        dn,
        ds,
        idf: &idf,
        mask,
    };
    let mut counters = StepCounters::default();
    let mut logs = Vec::with_capacity(cfg.adv_epochs);
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;

    for epoch in 1..=cfg.adv_epochs {
        let (mut ln, mut ls, mut lg, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut rewards = Vec::with_capacity(train.len());
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            counters.iterations += 1;
            let members: Vec<&AudioClip> = batch.iter().map(|&i| &train[i]).collect();
            let feats: Vec<&FeatureMatrix> = members.iter().map(|c| &c.features).collect();
            let memory = gen.encode(&feats, false)?.detach();
            let traces = draw_traces(gen, batch.len(), cfg.sigma, cfg.noise_mode, &mut rng);
            let samples = gen.sample(&memory, traces, vocab, &mut rng)?;
            let fake: Vec<&Caption> = samples.iter().map(|s| &s.caption).collect();
            let audio = ds.encode_audio(&feats)?;

            if mask.naturalness {
                let paired_text: Vec<&str> = members
                    .iter()
                    .map(|c| c.references[rng.random_range(0..c.references.len())].as_str())
                    .collect();
                let paired = tokenize_all(&paired_text, vocab)?;
                let paired_refs: Vec<&Caption> = paired.iter().collect();
                let loss = naturalness_loss(&dn.forward(&paired_refs)?, &dn.forward(&fake)?)?;
                opt_n.backward_step(&loss)?;
                counters.naturalness_steps += 1;
                ln += loss.to_scalar::<f64>()? * batch.len() as f64;
            }
            if mask.semantic {
                let paired_text: Vec<&str> = members
                    .iter()
                    .map(|c| c.references[rng.random_range(0..c.references.len())].as_str())
                    .collect();
                let paired = tokenize_all(&paired_text, vocab)?;
                let paired_refs: Vec<&Caption> = paired.iter().collect();
                let unpaired = unpaired_captions(&members, cfg.unpaired_per_clip, vocab, &mut rng)?;
                let loss = semantic_step_loss(ds, &audio, &paired_refs, &unpaired, Some(&fake), cfg.unpaired_per_clip)?;
                opt_s.backward_step(&loss)?;
                counters.semantic_steps += 1;
                ls += loss.to_scalar::<f64>()? * batch.len() as f64;
            }

            let noise: Vec<&NoiseTrace> = samples.iter().map(|s| &s.noise).collect();
            let greedy = gen.greedy(&memory, &noise, vocab)?;
            let greedy_refs: Vec<&Caption> = greedy.iter().collect();
            let references: Vec<&[String]> = members.iter().map(|c| c.references.as_slice()).collect();
            let r_sample = scorer.score(&audio, &fake, &references)?;
            let r_greedy = scorer.score(&audio, &greedy_refs, &references)?;
            let breakdown: Vec<RewardBreakdown> = r_sample
                .iter()
                .zip(&r_greedy)
                .map(|(s, g)| compute_reward(s, g, cfg.lambda, mask))
                .collect();
            let mean = breakdown.iter().map(|b| b.combined).sum::<f64>() / breakdown.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged(format!(
                    "mean reward {mean} at epoch {epoch}, iteration {}",
                    counters.iterations
                )));
            }
            let advantages: Vec<f64> = breakdown.iter().map(|b| b.advantage).collect();
            let stats = scst_update(gen, &mut opt_g, &feats, &samples, &advantages)?;
            counters.generator_steps += 1;
            lg += stats.loss * batch.len() as f64;
            count += batch.len();
            rewards.extend(breakdown);

            debug_assert_eq!(counters.generator_steps, counters.iterations);
            if mask.naturalness && counters.naturalness_steps != counters.generator_steps
                || mask.semantic && counters.semantic_steps != counters.generator_steps
            {
                return Err(Error::Diverged("discriminator/generator alternation broken".into()));
            }
        }
        if ds.audio_checksum()? != frozen {
            return Err(Error::Diverged("frozen audio branch of D_S changed".into()));
        }
        let mut losses = BTreeMap::from([("generator".to_string(), lg / count.max(1) as f64)]);
        if mask.naturalness {
            losses.insert("naturalness".into(), ln / count.max(1) as f64);
        }
        if mask.semantic {
            losses.insert("semantic".into(), ls / count.max(1) as f64);
        }
        let mut val = BTreeMap::new();
        if !validation.is_empty() {
            let v = validation_cider(gen, validation, vocab, cfg.batch_size)?;
            val.insert("cider".to_string(), v);
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, gen.store().snapshot()?));
            }
        }
        let log = EpochLog {
            epoch,
            phase: "adversarial".into(),
            losses,
            mean_reward: Some(RewardMeans::from(&rewards)),
            val,
        };
        on_epoch(&log)?;
        logs.push(log);
    }
    let (best_epoch, best_snapshot) = match best {
        Some((_, e, s)) => (Some(e), Some(s)),
        None => (None, None),
    };
    Ok(AdversarialOutcome {
        logs,
        counters,
        best_epoch,
        best_snapshot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let p = RewardParts {
            d_n: 0.8,
            d_s: 0.6,
            l_e: 0.4,
        };
        assert!((combine_reward(&p, 0.5, ComponentMask::ALL) - 0.9).abs() < 1e-12);
        assert!((combine_reward(&p, 1.0, ComponentMask::ALL) - 1.4).abs() < 1e-12);
        assert!((combine_reward(&p, 0.0, ComponentMask::ALL) - 0.4).abs() < 1e-12);
        // evaluator masked: lambda forced to 1
        assert!((combine_reward(&p, 0.3, ComponentMask::ND_ONLY) - 0.8).abs() < 1e-12);
        assert!((combine_reward(&p, 0.3, ComponentMask::SD_ONLY) - 0.6).abs() < 1e-12);
        // both discriminators masked: lambda forced to 0
        assert!((combine_reward(&p, 0.7, ComponentMask::LE_ONLY) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn breakdown_reconstructs() {
        let s = RewardParts {
            d_n: 0.3,
            d_s: 0.9,
            l_e: 1.7,
        };
        let g = RewardParts {
            d_n: 0.5,
            d_s: 0.2,
            l_e: 0.1,
        };
        let b = compute_reward(&s, &g, 0.25, ComponentMask::ALL);
        assert!((b.combined - (0.25 * (b.d_n + b.d_s) + 0.75 * b.l_e)).abs() < 1e-9);
        assert!((b.advantage - (b.combined - b.baseline)).abs() < 1e-12);
    }

    #[test]
    fn component_mask_parsing() {
        assert_eq!("nd".parse::<ComponentMask>().unwrap(), ComponentMask::ND_ONLY);
        assert_eq!("nd,sd,le".parse::<ComponentMask>().unwrap(), ComponentMask::ALL);
        assert_eq!(ComponentMask::ALL.to_string(), "nd,sd,le");
        assert!("".parse::<ComponentMask>().is_err());
        assert!("xx".parse::<ComponentMask>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lambda: 1.5,
                ..Default::default()
            },
            TrainConfig {
                sigma: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..40 {
            for bs in 2..9 {
                let b = batches(n, bs, &mut rng);
                let mut all: Vec<usize> = b.iter().flatten().copied().collect();
                all.sort();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
                assert!(b.iter().all(|x| x.len() >= 2));
            }
        }
    }

    #[test]
    fn phase_streams_differ() {
        let a: u64 = phase_rng(1, Phase::Mle).random();
        let b: u64 = phase_rng(1, Phase::Adversarial).random();
        assert_ne!(a, b);
        assert_eq!(a, phase_rng(1, Phase::Mle).random::<u64>());
    }
}
