use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use audiocap::corpus::{all_references, load_manifest, make_toy_dataset, write_manifest, AudioClip, ManifestEntry, Vocabulary};
use audiocap::discriminators::{NaturalnessDiscriminator, SemanticDiscriminator};
use audiocap::features::{log_mel, save_features, MelParams};
use audiocap::generator::{Generator, NoiseMode, NoiseTrace};
use audiocap::metrics::{evaluate_human, evaluate_sets, ngram_count_ratios, vocab_by_threshold, FidelityReport, MetricsReport};
use audiocap::training::{
    phase_rng, pretrain_discriminators, pretrain_generator, train_adversarial, ComponentMask, EpochLog, Phase,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{read_captions, read_references, write_captions, CaptionMap};
use crate::config::ExperimentConfig;
use crate::layout::{JsonLines, RunDir};

#[derive(Debug, Parser)]
#[command(name = "audiocap", version, about = "Diverse audio captioning with adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (train/val/test manifests, features) and a
    /// matching toy config.
    ToyData {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        clips: usize,
        #[arg(long, default_value_t = 10)]
        val_clips: usize,
        #[arg(long, default_value_t = 10)]
        test_clips: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract log-mel features from the WAV files of a raw manifest.
    Prepare {
        /// JSON Lines: {"clip_id", "audio", "captions"}; audio paths are
        /// relative to the manifest.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving `features/` and `manifest.jsonl`.
        #[arg(long)]
        out: PathBuf,
        /// Optional config supplying the mel parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// MLE pretraining of the generator.
    PretrainGen(#[command(flatten)] Overrides),
    /// Pretraining of both discriminators against the MLE generator.
    PretrainDisc(#[command(flatten)] Overrides),
    /// Alternating adversarial training.
    TrainGan {
        #[command(flatten)]
        overrides: Overrides,
        /// Start from fresh networks when pretrained checkpoints are absent.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Caption a split: noise-conditioned greedy samples, or beam search.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        opts: GenerateArgs,
    },
    /// Fidelity and diversity report for a captions file.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        captions: PathBuf,
        /// Reference manifest; defaults to the test manifest.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Per-clip SPICE scores JSON; defaults to `paths.spice`.
        #[arg(long)]
        spice: Option<PathBuf>,
    },
    /// N-gram count ratios and vocabulary-threshold curves as CSV.
    Stats {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        captions: PathBuf,
    },
}

/// Flags that override config values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file; defaults to `<out>/config.toml`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Epochs of the phase being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the phase being run.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub noise_mode: Option<NoiseModeArg>,
    /// Active reward components, e.g. `nd,sd,le` or `le`.
    #[arg(long)]
    pub components: Option<ComponentMask>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseModeArg {
    PerStep,
    Fixed,
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(m: NoiseModeArg) -> Self {
        match m {
            NoiseModeArg::PerStep => NoiseMode::PerStep,
            NoiseModeArg::Fixed => NoiseMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    /// Beam search over the MLE generator without noise.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Generator checkpoint; defaults to generator_mle for --baseline and
    /// to generator_best (else generator_last) otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output name under captions/; defaults to `<split>_<baseline|cgan>`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Mle,
    Disc,
    Adversarial,
    Other,
}

impl Overrides {
    /// Loads the config (explicit file, else the run directory's echo) and
    /// applies the flags; `--epochs` and `--lr` target `stage`.
    fn resolve(&self, stage: Stage) -> Result<ExperimentConfig> {
        let path = match (&self.config, &self.out) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => out.join("config.toml"),
            (None, None) => bail!("no config: pass --config or --out pointing at an existing run"),
        };
        let mut cfg = ExperimentConfig::load(&path)?;
        self.apply(&mut cfg, stage);
        cfg.finalize()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig, stage: Stage) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.sigma {
            t.sigma = v;
        }
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.noise_mode {
            t.noise_mode = v.into();
        }
        if let Some(v) = self.components {
            t.components = v;
        }
        if let Some(v) = self.epochs {
            match stage {
                Stage::Mle => t.mle_epochs = v,
                Stage::Disc => t.disc_pretrain_epochs = v,
                Stage::Adversarial => t.adv_epochs = v,
                Stage::Other => {}
            }
        }
        if let Some(v) = self.lr {
            match stage {
                Stage::Mle => t.learning_rate = v,
                Stage::Disc => t.disc_learning_rate = v,
                Stage::Adversarial => t.adv_learning_rate = v,
                Stage::Other => {}
            }
        }
        if let Some(v) = &self.out {
            cfg.paths.out_dir = std::path::absolute(v).unwrap_or_else(|_| v.clone());
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ToyData {
            seed,
            clips,
            val_clips,
            test_clips,
            out,
        } => {
            let path = toy_data(seed, clips, val_clips, test_clips, &out)?;
            println!("wrote toy corpus and {}", path.display());
        }
        Command::Prepare { input, out, config } => {
            let mel = match config {
                Some(p) => ExperimentConfig::load(&p)?.mel,
                None => MelParams::default(),
            };
            let n = prepare(&input, &out, &mel)?;
            println!("prepared {n} clips into {}", out.display());
        }
        Command::PretrainGen(o) => {
            let cfg = o.resolve(Stage::Mle)?;
            let logs = pretrain_gen(&cfg)?;
            if let Some(l) = logs.last() {
                println!("mle done: epoch {} ce {:.4}", l.epoch, l.losses["ce"]);
            }
        }
        Command::PretrainDisc(o) => {
            let cfg = o.resolve(Stage::Disc)?;
            pretrain_disc(&cfg)?;
            println!("discriminators saved under {}", cfg.paths.out_dir.display());
        }
        Command::TrainGan { overrides, from_scratch } => {
            let cfg = overrides.resolve(Stage::Adversarial)?;
            let summary = train_gan(&cfg, from_scratch)?;
            println!("adversarial training done; best epoch {:?}", summary.best_epoch);
        }
        Command::Generate { overrides, opts } => {
            let mut cfg = overrides.resolve(Stage::Other)?;
            if let Some(b) = opts.beam_size {
                cfg.generate.beam_size = b;
            }
            if let Some(n) = opts.num_samples {
                cfg.generate.num_samples = n;
            }
            cfg.finalize()?;
            let path = generate(&cfg, &opts)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate {
            overrides,
            captions,
            references,
            spice,
        } => {
            let cfg = overrides.resolve(Stage::Other)?;
            let out = evaluate(&cfg, &captions, references.as_deref(), spice.as_deref())?;
            print!("{}", out.table());
        }
        Command::Stats { overrides, captions } => {
            let cfg = overrides.resolve(Stage::Other)?;
            for p in stats(&cfg, &captions)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn write_split(root: &Path, split: &str, clips: &[AudioClip]) -> Result<PathBuf> {
    let dir = root.join("features").join(split);
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let rel = PathBuf::from("features").join(split).join(format!("{}.feat", c.clip_id));
        save_features(&root.join(&rel), &c.features)?;
        entries.push(ManifestEntry {
            clip_id: c.clip_id.clone(),
            features: rel,
            captions: c.references.clone(),
        });
    }
    let manifest = root.join(format!("{split}.jsonl"));
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Writes train/val/test toy splits (seeds `seed`, `seed+1`, `seed+2`) and
/// a toy config whose run directory is `<out>/run`. Returns the config path.
pub fn toy_data(seed: u64, clips: usize, val_clips: usize, test_clips: usize, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    write_split(out, "train", &make_toy_dataset(seed, clips)?)?;
    write_split(out, "val", &make_toy_dataset(seed + 1, val_clips)?)?;
    write_split(out, "test", &make_toy_dataset(seed + 2, test_clips)?)?;
    let mut cfg = ExperimentConfig::toy();
    cfg.train.seed = seed;
    cfg.paths.train_manifest = Some("train.jsonl".into());
    cfg.paths.val_manifest = Some("val.jsonl".into());
    cfg.paths.test_manifest = Some("test.jsonl".into());
    cfg.paths.out_dir = "run".into();
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    clip_id: String,
    audio: PathBuf,
    captions: Vec<String>,
}

/// Mono samples in [-1, 1]; channels are averaged.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        bail!(
            "{}: sample rate {} Hz, expected {expected_rate} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        );
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let ch = spec.channels.max(1) as usize;
    Ok(interleaved.chunks(ch).map(|f| f.iter().sum::<f32>() / ch as f32).collect())
}

/// Feature extraction for a raw manifest. Returns the number of clips.
pub fn prepare(input: &Path, out: &Path, mel: &MelParams) -> Result<usize> {
    mel.validate()?;
    let base = input.parent().unwrap_or_else(|| Path::new("."));
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    fs::create_dir_all(out.join("features"))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry =
            serde_json::from_str(line).with_context(|| format!("{}, line {}", input.display(), i + 1))?;
        let samples = read_wav(&base.join(&raw.audio), mel.sample_rate)?;
        let feats = log_mel(&samples, mel).with_context(|| format!("clip {}", raw.clip_id))?;
        let rel = PathBuf::from("features").join(format!("{}.feat", raw.clip_id));
        save_features(&out.join(&rel), &feats)?;
        entries.push(ManifestEntry {
            clip_id: raw.clip_id,
            features: rel,
            captions: raw.captions,
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries.len())
}

fn manifest<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("paths.{what}_manifest is not set"))
}

/// Initialization seeds of (generator, D_N, D_S), all from the root seed.
pub fn init_seeds(seed: u64) -> [u64; 3] {
    let mut rng = phase_rng(seed, Phase::Init);
    [rng.random(), rng.random(), rng.random()]
}

fn epoch_logger(path: &Path) -> Result<impl FnMut(&EpochLog) -> audiocap::Result<()>> {
    let mut log = JsonLines::create(path)?;
    Ok(move |l: &EpochLog| {
        log.write(l)?;
        eprintln!("[{}] epoch {} {:?}", l.phase, l.epoch, l.losses);
        Ok(())
    })
}

pub fn pretrain_gen(cfg: &ExperimentConfig) -> Result<Vec<EpochLog>> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    run.echo_config(cfg, "pretrain-gen")?;
    let train = load_manifest(manifest(&cfg.paths.train_manifest, "train")?)?;
    let vocab = Vocabulary::build(&all_references(&train))?;
    vocab.save(&run.vocab())?;
    let gen = Generator::new(cfg.generator.clone(), vocab.len(), init_seeds(cfg.train.seed)[0])?;
    let logs = pretrain_generator(&gen, &train, &vocab, &cfg.train, epoch_logger(&run.log("mle"))?)?;
    gen.save(&run.checkpoint("generator_mle"))?;
    Ok(logs)
}

fn load_generator(path: &Path, vocab: &Vocabulary) -> Result<Generator> {
    let gen = Generator::load(path, None)?;
    if gen.vocab_size() != vocab.len() {
        bail!("{}: vocabulary size {} != {}", path.display(), gen.vocab_size(), vocab.len());
    }
    Ok(gen)
}

pub fn pretrain_disc(cfg: &ExperimentConfig) -> Result<Vec<EpochLog>> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    run.echo_config(cfg, "pretrain-disc")?;
    let train = load_manifest(manifest(&cfg.paths.train_manifest, "train")?)?;
    let vocab = Vocabulary::load(&run.vocab())?;
    let gen = load_generator(&run.checkpoint("generator_mle"), &vocab)?;
    let [_, sn, ss] = init_seeds(cfg.train.seed);
    let dn = NaturalnessDiscriminator::new(cfg.discriminator.clone(), vocab.len(), sn)?;
    let gc = gen.config();
    let ds = SemanticDiscriminator::new(cfg.discriminator.clone(), &gc.channels, gc.d_model, vocab.len(), ss)?;
    let logs = pretrain_discriminators(&gen, &dn, &ds, &train, &vocab, &cfg.train, epoch_logger(&run.log("disc"))?)?;
    dn.save(&run.checkpoint("naturalness"))?;
    ds.save(&run.checkpoint("semantic"))?;
    Ok(logs)
}

#[derive(Debug, Clone, Serialize)]
pub struct GanSummary {
    pub best_epoch: Option<usize>,
    pub iterations: usize,
    pub logs: Vec<EpochLog>,
}

pub fn train_gan(cfg: &ExperimentConfig, from_scratch: bool) -> Result<GanSummary> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    run.echo_config(cfg, "train-gan")?;
    let train = load_manifest(manifest(&cfg.paths.train_manifest, "train")?)?;
    let val = match &cfg.paths.val_manifest {
        Some(p) => load_manifest(p)?,
        None => Vec::new(),
    };
    let vocab = if run.vocab().is_file() {
        Vocabulary::load(&run.vocab())?
    } else if from_scratch {
        let v = Vocabulary::build(&all_references(&train))?;
        v.save(&run.vocab())?;
        v
    } else {
        bail!("{} missing; run pretrain-gen or pass --from-scratch", run.vocab().display());
    };
    let seeds = init_seeds(cfg.train.seed);
    let missing = |name: &str| -> Result<bool> {
        let p = run.checkpoint(name);
        match (p.is_file(), from_scratch) {
            (true, _) => Ok(false),
            (false, true) => Ok(true),
            (false, false) => bail!("{} missing; run the pretraining phases or pass --from-scratch", p.display()),
        }
    };
    let gen = if missing("generator_mle")? {
        Generator::new(cfg.generator.clone(), vocab.len(), seeds[0])?
    } else {
        load_generator(&run.checkpoint("generator_mle"), &vocab)?
    };
    let dn = if missing("naturalness")? {
        NaturalnessDiscriminator::new(cfg.discriminator.clone(), vocab.len(), seeds[1])?
    } else {
        NaturalnessDiscriminator::load(&run.checkpoint("naturalness"))?
    };
    let ds = if missing("semantic")? {
        let gc = gen.config();
        let ds = SemanticDiscriminator::new(cfg.discriminator.clone(), &gc.channels, gc.d_model, vocab.len(), seeds[2])?;
        ds.load_audio_encoder(gen.store())?;
        ds
    } else {
        SemanticDiscriminator::load(&run.checkpoint("semantic"))?
    };
    let out = train_adversarial(&gen, &dn, &ds, &train, &val, &vocab, &cfg.train, epoch_logger(&run.log("adversarial"))?)?;
    gen.save(&run.checkpoint("generator_last"))?;
    dn.save(&run.checkpoint("naturalness_adv"))?;
    ds.save(&run.checkpoint("semantic_adv"))?;
    if let Some(snap) = &out.best_snapshot {
        gen.store().restore(snap)?;
    }
    gen.save(&run.checkpoint("generator_best"))?;
    Ok(GanSummary {
        best_epoch: out.best_epoch,
        iterations: out.counters.iterations,
        logs: out.logs,
    })
}

/// `num_samples` greedy captions per clip, each under its own noise trace.
pub fn noise_captions<R: Rng>(
    gen: &Generator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    sigma: f64,
    mode: NoiseMode,
    num_samples: usize,
    rng: &mut R,
) -> Result<CaptionMap> {
    let mut out = CaptionMap::new();
    for clip in clips {
        let memory = gen.encode(&[&clip.features], false)?;
        let (_, s, d) = memory.dims3()?;
        let memory = memory.broadcast_as((num_samples, s, d))?.contiguous()?;
        let traces: Vec<NoiseTrace> = (0..num_samples).map(|_| gen.noise_trace(sigma, mode, rng)).collect();
        let refs: Vec<&NoiseTrace> = traces.iter().collect();
        let caps = gen.greedy(&memory, &refs, vocab)?;
        out.insert(clip.clip_id.clone(), caps.iter().map(|c| c.text().to_string()).collect());
    }
    Ok(out)
}

/// Top `num_samples` beam hypotheses per clip, without noise. When fewer
/// hypotheses finish than requested, the list is filled by cycling through
/// the ones found.
pub fn beam_captions(
    gen: &Generator,
    clips: &[AudioClip],
    vocab: &Vocabulary,
    beam_size: usize,
    num_samples: usize,
) -> Result<CaptionMap> {
    if num_samples > beam_size {
        bail!("--num-samples {num_samples} exceeds --beam-size {beam_size}");
    }
    let mut out = CaptionMap::new();
    for clip in clips {
        let memory = gen.encode(&[&clip.features], false)?;
        let hyps = gen.beam_search(&memory, beam_size, vocab)?;
        if hyps.is_empty() {
            bail!("beam search produced no hypothesis for {}", clip.clip_id);
        }
        let texts: Vec<String> = (0..num_samples).map(|i| hyps[i % hyps.len()].caption.text().to_string()).collect();
        out.insert(clip.clip_id.clone(), texts);
    }
    Ok(out)
}

pub fn generate(cfg: &ExperimentConfig, opts: &GenerateArgs) -> Result<PathBuf> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let split = opts.split.name();
    let manifest_path = match opts.split {
        Split::Train => &cfg.paths.train_manifest,
        Split::Val => &cfg.paths.val_manifest,
        Split::Test => &cfg.paths.test_manifest,
    };
    let clips = load_manifest(manifest(manifest_path, split)?)?;
    let vocab = Vocabulary::load(&run.vocab())?;
    let ckpt = match &opts.checkpoint {
        Some(p) => p.clone(),
        None if opts.baseline => run.checkpoint("generator_mle"),
        None => ["generator_best", "generator_last"]
            .iter()
            .map(|n| run.checkpoint(n))
            .find(|p| p.is_file())
            .ok_or_else(|| anyhow!("no adversarial generator checkpoint in {}", run.root().display()))?,
    };
    let gen = load_generator(&ckpt, &vocab)?;
    let g = &cfg.generate;
    let caps = if opts.baseline {
        beam_captions(&gen, &clips, &vocab, g.beam_size, g.num_samples)?
    } else {
        let mut rng = phase_rng(cfg.train.seed, Phase::Generate);
        noise_captions(&gen, &clips, &vocab, cfg.train.sigma, cfg.train.noise_mode, g.num_samples, &mut rng)?
    };
    let name = opts
        .name
        .clone()
        .unwrap_or_else(|| format!("{split}_{}", if opts.baseline { "baseline" } else { "cgan" }));
    let path = run.captions(&name);
    write_captions(&caps, g.num_samples, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub captions: PathBuf,
    pub report: MetricsReport,
    /// Leave-one-out score of the human references themselves (×100).
    pub human: FidelityReport,
}

impl Evaluation {
    pub fn table(&self) -> String {
        format!(
            "{}\nhuman (leave-one-out): BLEU_4 {:.2}  CIDEr {:.2}\n",
            self.report.table(),
            self.human.bleu_4,
            self.human.cider * 100.0
        )
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "captions".into())
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    captions: &Path,
    references: Option<&Path>,
    spice: Option<&Path>,
) -> Result<Evaluation> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let refs_path = match references {
        Some(p) => p,
        None => manifest(&cfg.paths.test_manifest, "test")?,
    };
    let generated = read_captions(captions)?;
    let refs = read_references(refs_path)?;
    let spice_scores: Option<BTreeMap<String, f64>> = match spice.or(cfg.paths.spice.as_deref()) {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?),
        None => None,
    };
    let report = evaluate_sets(&generated, &refs, spice_scores.as_ref())?;
    let out = Evaluation {
        captions: captions.to_path_buf(),
        report,
        human: evaluate_human(&refs)?,
    };
    let name = stem(captions);
    fs::write(run.report(&name, "json"), serde_json::to_string_pretty(&out)? + "\n")?;
    fs::write(run.report(&name, "txt"), out.table())?;
    Ok(out)
}

#[derive(Serialize)]
struct ThresholdRow {
    threshold: u64,
    train_references: usize,
    generated: usize,
}

/// Writes `<stem>_count_ratios.csv` (generated vs training n-gram counts)
/// and `<stem>_vocab_thresholds.csv`. Returns the written paths.
pub fn stats(cfg: &ExperimentConfig, captions: &Path) -> Result<Vec<PathBuf>> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let train: Vec<String> = read_references(manifest(&cfg.paths.train_manifest, "train")?)?
        .into_values()
        .flatten()
        .collect();
    let generated: Vec<String> = read_captions(captions)?.into_values().flatten().collect();
    if generated.is_empty() {
        bail!("{} holds no captions", captions.display());
    }
    let name = stem(captions);
    let ratios_path = run.report(&format!("{name}_count_ratios"), "csv");
    let mut w = csv::Writer::from_path(&ratios_path)?;
    for r in ngram_count_ratios(&train, &generated, train.len(), generated.len())? {
        w.serialize(r)?;
    }
    w.flush()?;

    let th = &cfg.metrics.vocab_thresholds;
    let curve_path = run.report(&format!("{name}_vocab_thresholds"), "csv");
    let mut w = csv::Writer::from_path(&curve_path)?;
    for ((t, a), (_, b)) in vocab_by_threshold(&train, th)?.into_iter().zip(vocab_by_threshold(&generated, th)?) {
        w.serialize(ThresholdRow {
            threshold: t,
            train_references: a,
            generated: b,
        })?;
    }
    w.flush()?;
    Ok(vec![ratios_path, curve_path])
}
