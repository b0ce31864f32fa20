//! WAV decoding, log-mel spectrograms and fixed-length cropping.

mod mel;
mod wav;

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Rng, Tensor};

pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelFilterbank, MelFrontend};
pub use wav::{decode_wav, encode_wav, read_wav, Audio};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Seconds of audio fed to the model after cropping or padding.
    pub sample_length: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop_length: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
            sample_length: 0.4,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    /// Short crops suited to primate-call style data.
    pub fn prs() -> Self {
        Self {
            sample_length: 0.4,
            ..Self::default()
        }
    }

    /// Longer crops suited to cough-recording style data.
    pub fn ccs() -> Self {
        Self {
            sample_length: 1.2,
            ..Self::default()
        }
    }

    /// Small frontend for synthetic desk-scale runs: 32 mel bands and
    /// 24 frames per crop.
    pub fn tiny() -> Self {
        Self {
            n_fft: 512,
            hop_length: 256,
            n_mels: 32,
            sample_length: 0.4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "prs" => Some(Self::prs()),
            "ccs" => Some(Self::ccs()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Every violated invariant, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.sample_rate == 0 {
            v.push("frontend.sample_rate must be positive".into());
        }
        if self.n_fft < 2 {
            v.push("frontend.n_fft must be at least 2".into());
        }
        if self.hop_length == 0 || self.hop_length > self.n_fft {
            v.push(format!(
                "frontend.hop_length {} must be in 1..=n_fft ({})",
                self.hop_length, self.n_fft
            ));
        }
        if self.n_mels == 0 {
            v.push("frontend.n_mels must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            v.push(format!(
                "frontend needs 0 <= f_min < f_max <= sample_rate/2, got f_min={} f_max={} nyquist={nyquist}",
                self.f_min, self.f_max
            ));
        }
        if !(self.sample_length > 0.0 && self.sample_length.is_finite()) {
            v.push(format!("frontend.sample_length {} must be > 0", self.sample_length));
        }
        if !(self.log_floor > 0.0) {
            v.push(format!("frontend.log_floor {} must be > 0", self.log_floor));
        }
        v
    }

    /// Number of frames in a crop of `sample_length` seconds.
    pub fn target_frames(&self) -> usize {
        let samples = (self.sample_length * self.sample_rate as f64).round() as usize;
        if samples < self.n_fft {
            1
        } else {
            1 + (samples - self.n_fft) / self.hop_length
        }
    }

    /// `ln(log_floor)`, the value silence maps to.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

/// Log-power mel spectrogram, `[n_mels × n_frames]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub sample_rate: u32,
    pub hop_length: usize,
    pub source_id: String,
}

impl MelSpectrogram {
    /// In-memory spectrogram without audio metadata.
    pub fn from_values(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if n_mels == 0 || n_frames == 0 || values.len() != n_mels * n_frames {
            return Err(Error::invalid(format!(
                "{} values do not form a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        Ok(Self {
            values,
            n_mels,
            n_frames,
            sample_rate: 0,
            hop_length: 0,
            source_id: String::new(),
        })
    }

    pub fn filled(n_mels: usize, n_frames: usize, value: f32) -> Self {
        Self::from_values(n_mels, n_frames, vec![value; n_mels * n_frames]).expect("non-empty")
    }

    #[inline]
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    #[inline]
    pub fn set(&mut self, mel: usize, frame: usize, v: f32) {
        self.values[mel * self.n_frames + frame] = v;
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|m| self.get(m, frame)).collect()
    }

    /// Index of the loudest mel band in each frame (first on ties).
    pub fn argmax_per_frame(&self) -> Vec<usize> {
        (0..self.n_frames)
            .map(|t| {
                let mut best = 0;
                for m in 1..self.n_mels {
                    if self.get(m, t) > self.get(best, t) {
                        best = m;
                    }
                }
                best
            })
            .collect()
    }

    /// Same shape and metadata with new values.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            values: Vec::new(),
            n_mels: self.n_mels,
            n_frames: self.n_frames,
            sample_rate: self.sample_rate,
            hop_length: self.hop_length,
            source_id: self.source_id.clone(),
        }
    }

    /// Shift log values so the floor maps to 0 and power 1 maps to 1:
    /// `(v - ln floor) / -ln floor`. Silence and padding become exact zeros,
    /// which is the domain the augmentations and models work in.
    pub fn floor_normalized(&self, log_floor: f64) -> Self {
        let f = log_floor.ln() as f32;
        self.with_values(self.values.iter().map(|&v| (v - f) / -f).collect())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.n_mels, self.n_frames], self.values.clone()).expect("consistent shape")
    }

    /// Store in the checkpoint container as a single `values` entry.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind".into(), "mel_spectrogram".into());
        meta.insert("sample_rate".into(), self.sample_rate.to_string());
        meta.insert("hop_length".into(), self.hop_length.to_string());
        meta.insert("source_id".into(), self.source_id.clone());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("values".into(), self.to_tensor())], &meta)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (mut tensors, meta) = read_checkpoint(BufReader::new(f))?;
        if tensors.len() != 1 || tensors[0].0 != "values" || tensors[0].1.rank() != 2 {
            return Err(Error::Checkpoint(format!("{} is not a spectrogram cache", path.display())));
        }
        let (_, t) = tensors.remove(0);
        let (n_mels, n_frames) = (t.shape()[0], t.shape()[1]);
        let parse = |k: &str| meta.get(k).and_then(|v| v.parse().ok()).unwrap_or(0);
        let spec = Self {
            values: t.into_data(),
            n_mels,
            n_frames,
            sample_rate: parse("sample_rate") as u32,
            hop_length: parse("hop_length"),
            source_id: meta.get("source_id").cloned().unwrap_or_default(),
        };
        Ok((spec, meta))
    }
}

/// Decode a WAV file and compute its log-mel spectrogram. Files whose sample
/// rate differs from the configuration are rejected.
pub fn load_spectrogram(path: &Path, frontend: &MelFrontend, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    spectrogram_of(read_wav(path)?, &path.display().to_string(), frontend, cfg)
}

/// Log-mel spectrogram of decoded audio; `source` names it in errors and
/// becomes the spectrogram's source id.
pub fn spectrogram_of(audio: Audio, source: &str, frontend: &MelFrontend, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Wav(format!(
            "{source}: sample rate {} Hz does not match configured {} Hz; resample the file offline",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let mut samples = audio.samples;
    if samples.len() < cfg.n_fft {
        samples.resize(cfg.n_fft, 0.0);
    }
    frontend.compute(&samples, source)
}

/// Bring a spectrogram to exactly `target_frames` columns.
///
/// Longer inputs are cropped: a uniformly random window when `training`,
/// the centered window otherwise. Shorter inputs are padded symmetrically
/// with `pad_value` (the extra column goes right when the gap is odd).
pub fn crop_or_pad(
    spec: &MelSpectrogram,
    target_frames: usize,
    pad_value: f32,
    rng: &mut Rng,
    training: bool,
) -> MelSpectrogram {
    let target = target_frames.max(1);
    let n = spec.n_frames;
    if n == target {
        return spec.clone();
    }
    let mut out = spec.clone_meta();
    out.n_frames = target;
    out.values = vec![pad_value; spec.n_mels * target];
    if n > target {
        let start = if training {
            rng.below(n - target + 1)
        } else {
            (n - target) / 2
        };
        for m in 0..spec.n_mels {
            out.values[m * target..(m + 1) * target]
                .copy_from_slice(&spec.values[m * n + start..m * n + start + target]);
        }
    } else {
        let left = (target - n) / 2;
        for m in 0..spec.n_mels {
            out.values[m * target + left..m * target + left + n].copy_from_slice(&spec.values[m * n..(m + 1) * n]);
        }
    }
    out
}
