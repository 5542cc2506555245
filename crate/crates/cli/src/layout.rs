use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Output directory of one experiment:
///
/// ```text
/// config.toml              effective config of the latest phase
/// configs/<phase>.toml     effective config of each phase
/// vocab.json
/// checkpoints/             generator_mle, naturalness, semantic,
///                          generator_last, generator_best, *_adv
/// logs/<phase>.jsonl       one record per epoch
/// captions/<name>.json
/// reports/<name>.{json,txt,csv}
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "captions", "reports", "configs"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.safetensors"))
    }

    pub fn log(&self, phase: &str) -> PathBuf {
        self.root.join("logs").join(format!("{phase}.jsonl"))
    }

    pub fn captions(&self, name: &str) -> PathBuf {
        self.root.join("captions").join(format!("{name}.json"))
    }

    pub fn report(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.{ext}"))
    }

    pub fn echo_config(&self, cfg: &ExperimentConfig, phase: &str) -> Result<()> {
        let text = cfg.to_toml()?;
        fs::write(self.config(), &text)?;
        fs::write(self.root.join("configs").join(format!("{phase}.toml")), &text)?;
        Ok(())
    }
}

/// Truncating JSON Lines writer.
pub struct JsonLines {
    file: File,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { file })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")
    }
}
