//! Log-mel spectrogram extraction and SpecAugment-style masking.

use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::container::{Array, Container};
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;

const FEATURE_FORMAT: &str = "audiocap-features";
const FEATURE_VERSION: &str = "1";

/// Row-major `frames × 64` matrix of log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::RejectedInput("feature matrix has no frames".into()));
        }
        if data.len() != frames * N_MELS {
            return Err(Error::RejectedInput(format!(
                "feature data has {} values, expected {frames}×{N_MELS}",
                data.len()
            )));
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * N_MELS + bin]
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

pub fn save_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut c = Container::default();
    c.metadata.insert("format".into(), FEATURE_FORMAT.into());
    c.metadata.insert("version".into(), FEATURE_VERSION.into());
    c.arrays.insert(
        "features".into(),
        Array {
            shape: vec![features.frames, N_MELS],
            data: features.data.clone(),
        },
    );
    c.save(path)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let err = |msg: String| Error::FeatureFile {
        path: path.to_path_buf(),
        msg,
    };
    let c = Container::load(path).map_err(|e| err(e.to_string()))?;
    if c.metadata.get("format").map(String::as_str) != Some(FEATURE_FORMAT) {
        return Err(err("not a feature container".into()));
    }
    let a = c
        .arrays
        .get("features")
        .ok_or_else(|| err("missing `features` array".into()))?;
    match a.shape.as_slice() {
        [frames, bins] if *bins == N_MELS && *frames >= 1 => {
            FeatureMatrix::new(*frames, a.data.clone()).map_err(|e| err(e.to_string()))
        }
        s => Err(err(format!("expected shape [frames, {N_MELS}], got {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            window: 1024,
            hop: 512,
            n_mels: N_MELS,
            log_floor: 1e-10,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels != N_MELS {
            return Err(Error::Config(format!("n_mels must be {N_MELS}")));
        }
        if self.hop == 0 || self.hop > self.window {
            return Err(Error::Config("hop must be in 1..=window".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            1 + (samples - self.window) / self.hop
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist;
/// returns `n_mels` rows of `window / 2 + 1` weights.
pub fn mel_filterbank(params: &MelParams) -> Vec<Vec<f64>> {
    let n_bins = params.window / 2 + 1;
    let nyquist = params.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    (0..params.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * params.sample_rate as f64 / params.window as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Natural-log mel energies of a mono waveform, one row per full window
/// (no padding), power spectrum through a periodic Hann window.
pub fn log_mel(waveform: &[f32], params: &MelParams) -> Result<FeatureMatrix> {
    params.validate()?;
    if waveform.len() < params.window {
        return Err(Error::RejectedInput(format!(
            "waveform has {} samples, shorter than one {}-sample window",
            waveform.len(),
            params.window
        )));
    }
    let frames = params.frame_count(waveform.len());
    let hann: Vec<f64> = (0..params.window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / params.window as f64).cos())
        .collect();
    let bank = mel_filterbank(params);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.window);
    let n_bins = params.window / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); params.window];
    let mut power = vec![0f64; n_bins];
    let mut data = Vec::with_capacity(frames * N_MELS);
    for f in 0..frames {
        let start = f * params.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(waveform[start + i] as f64 * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for filter in &bank {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(params.log_floor).ln() as f32);
        }
    }
    FeatureMatrix::new(frames, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            max_time_width: 64,
            n_freq_masks: 2,
            max_freq_width: 8,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        Self {
            n_time_masks: 0,
            max_time_width: 0,
            n_freq_masks: 0,
            max_freq_width: 0,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.n_time_masks * self.max_time_width == 0 && self.n_freq_masks * self.max_freq_width == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Frequency,
}

/// A contiguous band `start..start + width` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Draws mask bands: widths uniform in `0..=max` (clamped to the axis
/// length), start uniform over the positions that keep the band inside.
pub fn sample_masks<R: Rng>(frames: usize, params: &AugmentParams, rng: &mut R) -> Vec<Mask> {
    let mut masks = Vec::new();
    let mut draw = |axis, count, max_width: usize, len: usize, rng: &mut R| {
        for _ in 0..count {
            let width = rng.random_range(0..=max_width.min(len));
            let start = rng.random_range(0..=len - width);
            masks.push(Mask { axis, start, width });
        }
    };
    draw(MaskAxis::Time, params.n_time_masks, params.max_time_width, frames, rng);
    draw(MaskAxis::Frequency, params.n_freq_masks, params.max_freq_width, N_MELS, rng);
    masks
}

/// Replaces every masked cell with the mean of the unmasked input matrix.
pub fn apply_masks(features: &FeatureMatrix, masks: &[Mask]) -> FeatureMatrix {
    let fill = features.mean();
    let mut out = features.clone();
    for m in masks {
        let end = match m.axis {
            MaskAxis::Time => (m.start + m.width).min(out.frames),
            MaskAxis::Frequency => (m.start + m.width).min(N_MELS),
        };
        for i in m.start..end {
            match m.axis {
                MaskAxis::Time => out.data[i * N_MELS..(i + 1) * N_MELS].fill(fill),
                MaskAxis::Frequency => {
                    for t in 0..out.frames {
                        out.data[t * N_MELS + i] = fill;
                    }
                }
            }
        }
    }
    out
}

pub fn spec_augment<R: Rng>(
    features: &FeatureMatrix,
    params: &AugmentParams,
    rng: &mut R,
) -> FeatureMatrix {
    if params.is_noop() {
        return features.clone();
    }
    let masks = sample_masks(features.frames, params, rng);
    apply_masks(features, &masks)
}
