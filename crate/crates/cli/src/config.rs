use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use audiocap::discriminators::DiscriminatorConfig;
use audiocap::features::MelParams;
use audiocap::generator::GeneratorConfig;
use audiocap::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Per-clip SPICE scores (`{clip_id: score}`), if available.
    pub spice: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            spice: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Word-frequency thresholds for the vocabulary curve of `stats`.
    pub vocab_thresholds: Vec<u64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            vocab_thresholds: vec![0, 1, 2, 3, 4, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub num_samples: usize,
    pub beam_size: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            num_samples: 5,
            beam_size: 5,
        }
    }
}

/// The whole experiment in one document. `train.sigma` and
/// `train.noise_mode` are authoritative; the generator section mirrors them
/// after [`ExperimentConfig::finalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub mel: MelParams,
    pub paths: Paths,
    pub metrics: MetricOptions,
    pub generate: GenerateOptions,
}

impl ExperimentConfig {
    /// CPU-scale preset used with `toy-data`.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            train: TrainConfig::toy(),
            ..Self::default()
        }
    }

    /// Reads a TOML config; relative paths are resolved against the file's
    /// directory so the document can be used from anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
        cfg.paths.resolve(&std::path::absolute(parent)?);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Propagates shared settings and validates every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.generator.noise_sigma = self.train.sigma;
        self.generator.noise_mode = self.train.noise_mode;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.mel.validate()?;
        let a = &self.train.augment;
        if a.max_freq_width > self.mel.n_mels {
            bail!("train.augment.max_freq_width exceeds n_mels");
        }
        if self.generate.num_samples == 0 || self.generate.beam_size == 0 {
            bail!("generate.num_samples and generate.beam_size must be >= 1");
        }
        if self.metrics.vocab_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            bail!("metrics.vocab_thresholds must be strictly ascending");
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.train_manifest, &mut self.val_manifest, &mut self.test_manifest, &mut self.spice]
            .into_iter()
            .flatten()
        {
            abs(p);
        }
        abs(&mut self.out_dir);
    }
}
