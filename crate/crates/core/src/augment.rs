//! Spectrogram augmentations: temporal shift, multiplicative noise,
//! SpecAugment-style masking and loudness scaling.
//!
//! Each augmentation is controlled by one ratio; a ratio of zero returns the
//! input unchanged without consuming random draws. Random draws happen per
//! call, so every sample drawn from the training set gets fresh parameters.

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Maximum shift as a fraction of the time axis, in `[0, 1]`.
    pub shift_ratio: f64,
    /// Standard deviation of the relative Gaussian noise, `>= 0`.
    pub noise_ratio: f64,
    /// Maximum mask width as a fraction of each axis, in `[0, 1]`.
    pub mask_ratio: f64,
    /// Maximum relative loudness gain, `>= 0`.
    pub loudness_ratio: f64,
}

impl AugmentParams {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let unit = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x.is_finite() && (0.0..=1.0).contains(&x)) {
                v.push(format!("augment.{name} = {x} must be in [0, 1]"));
            }
        };
        let nonneg = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("augment.{name} = {x} must be finite and >= 0"));
            }
        };
        unit("shift_ratio", self.shift_ratio, &mut v);
        nonneg("noise_ratio", self.noise_ratio, &mut v);
        unit("mask_ratio", self.mask_ratio, &mut v);
        nonneg("loudness_ratio", self.loudness_ratio, &mut v);
        v
    }

    pub fn is_identity(&self) -> bool {
        self.shift_ratio == 0.0 && self.noise_ratio == 0.0 && self.mask_ratio == 0.0 && self.loudness_ratio == 0.0
    }
}

/// Random parameters of one shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftDraw {
    pub right: bool,
    /// Fraction of the time axis, `U(0, shift_ratio)`.
    pub fraction: f64,
}

impl ShiftDraw {
    pub fn sample(shift_ratio: f64, rng: &mut Rng) -> Self {
        let right = rng.bernoulli(0.5);
        let fraction = rng.uniform_range(0.0, shift_ratio);
        Self { right, fraction }
    }

    /// Signed frame offset, positive to the right.
    pub fn frames(&self, n_frames: usize) -> isize {
        let k = (self.fraction * n_frames as f64).round() as isize;
        if self.right {
            k
        } else {
            -k
        }
    }
}

/// Move columns by `offset` frames (positive = later in time). Vacated
/// columns are zero.
pub fn shift_frames(spec: &MelSpectrogram, offset: isize) -> MelSpectrogram {
    let n = spec.n_frames as isize;
    let mut values = vec![0.0; spec.values.len()];
    for m in 0..spec.n_mels {
        for t in 0..n {
            let src = t - offset;
            if (0..n).contains(&src) {
                values[m * spec.n_frames + t as usize] = spec.get(m, src as usize);
            }
        }
    }
    spec.with_values(values)
}

pub fn shift(spec: &MelSpectrogram, shift_ratio: f64, rng: &mut Rng) -> MelSpectrogram {
    if shift_ratio == 0.0 {
        return spec.clone();
    }
    let draw = ShiftDraw::sample(shift_ratio, rng);
    shift_frames(spec, draw.frames(spec.n_frames))
}

/// `S + S·noise` with `noise ~ N(0, noise_ratio)` drawn per cell.
pub fn add_noise(spec: &MelSpectrogram, noise_ratio: f64, rng: &mut Rng) -> MelSpectrogram {
    if noise_ratio == 0.0 {
        return spec.clone();
    }
    let values = spec
        .values
        .iter()
        .map(|&s| {
            let noise = rng.normal(0.0, noise_ratio) as f32;
            s + s * noise
        })
        .collect();
    spec.with_values(values)
}

/// One mask window on one axis: cells in `[start, min(start + width, len))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub start: usize,
    pub width: usize,
}

impl MaskDraw {
    pub fn sample(axis_len: usize, mask_ratio: f64, rng: &mut Rng) -> Self {
        let start = (rng.uniform_range(0.0, axis_len as f64).floor() as usize).min(axis_len - 1);
        let width = rng.uniform_range(0.0, mask_ratio * axis_len as f64).round() as usize;
        Self { start, width }
    }

    pub fn range(&self, axis_len: usize) -> std::ops::Range<usize> {
        self.start..(self.start + self.width).min(axis_len)
    }
}

/// Masks applied by one SpecAugment call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecAugmentDraw {
    pub time: MaskDraw,
    pub mel: MaskDraw,
}

/// Zero one window of frames and one window of mel bands, returning the draws
/// that were applied.
pub fn spec_augment_logged(
    spec: &MelSpectrogram,
    mask_ratio: f64,
    rng: &mut Rng,
) -> (MelSpectrogram, Option<SpecAugmentDraw>) {
    if mask_ratio == 0.0 {
        return (spec.clone(), None);
    }
    let time = MaskDraw::sample(spec.n_frames, mask_ratio, rng);
    let mel = MaskDraw::sample(spec.n_mels, mask_ratio, rng);
    let mut out = spec.clone();
    for m in 0..spec.n_mels {
        for t in time.range(spec.n_frames) {
            out.set(m, t, 0.0);
        }
    }
    for m in mel.range(spec.n_mels) {
        for t in 0..spec.n_frames {
            out.set(m, t, 0.0);
        }
    }
    (out, Some(SpecAugmentDraw { time, mel }))
}

pub fn spec_augment(spec: &MelSpectrogram, mask_ratio: f64, rng: &mut Rng) -> MelSpectrogram {
    spec_augment_logged(spec, mask_ratio, rng).0
}

/// `S·(1 + l)` for a fixed gain `l`.
pub fn scale_loudness(spec: &MelSpectrogram, gain: f64) -> MelSpectrogram {
    let f = (1.0 + gain) as f32;
    spec.with_values(spec.values.iter().map(|&s| s * f).collect())
}

/// `S + S·l` with `l ~ U(0, loudness_ratio)`.
pub fn loudness(spec: &MelSpectrogram, loudness_ratio: f64, rng: &mut Rng) -> MelSpectrogram {
    if loudness_ratio == 0.0 {
        return spec.clone();
    }
    scale_loudness(spec, rng.uniform_range(0.0, loudness_ratio))
}

/// Shift, noise, masking, loudness, in that order.
pub fn apply_all(spec: &MelSpectrogram, params: &AugmentParams, rng: &mut Rng) -> MelSpectrogram {
    let s = shift(spec, params.shift_ratio, rng);
    let s = add_noise(&s, params.noise_ratio, rng);
    let s = spec_augment(&s, params.mask_ratio, rng);
    loudness(&s, params.loudness_ratio, rng)
}
