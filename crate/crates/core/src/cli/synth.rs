//! Synthetic, class-separable audio for end-to-end checks.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use crate::audio::encode_wav;
use crate::error::{Error, Result};
use crate::sampling::{LabeledSample, Manifest, Split};
use crate::tensor::Rng;

const TONES_HZ: [f64; 5] = [440.0, 1000.0, 1800.0, 2800.0, 4200.0];
const BANDS_HZ: [f64; 5] = [1400.0, 2400.0, 3400.0, 5200.0, 6800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Mean number of clips per class; the total is `n_per_class · n_classes`.
    pub n_per_class: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Ratio between the largest and smallest train class.
    pub imbalance: f64,
    pub sample_rate: u32,
    /// Clip length in seconds.
    pub duration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            n_classes: 2,
            seed: 0,
            imbalance: 3.0,
            sample_rate: 16_000,
            duration: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if ![2, 5].contains(&self.n_classes) {
            v.push(format!("synth: n_classes must be 2 or 5, got {}", self.n_classes));
        }
        if !(self.imbalance >= 1.0 && self.imbalance.is_finite()) {
            v.push(format!("synth: imbalance {} must be >= 1", self.imbalance));
        }
        if self.sample_rate < 16_000 {
            v.push("synth: sample_rate must be at least 16000 Hz".into());
        }
        if !(self.duration > 0.0 && self.duration <= 10.0) {
            v.push(format!("synth: duration {} must be in (0, 10] s", self.duration));
        }
        if v.is_empty() && self.counts().iter().any(|c| c.contains(&0)) {
            v.push(format!(
                "synth: n_per_class {} is too small to give every class a train, devel and test clip at imbalance {}",
                self.n_per_class, self.imbalance
            ));
        }
        v
    }

    /// `[train, devel, test]` clip counts per class. Devel and test take
    /// 15% each and stay balanced; the train remainder is split with
    /// weights falling linearly from `imbalance` (class 0) to 1.
    pub fn counts(&self) -> Vec<[usize; 3]> {
        let k = self.n_classes;
        let held = (0.15 * self.n_per_class as f64).round() as usize;
        let train_total = (self.n_per_class * k).saturating_sub(2 * k * held);
        let w: Vec<f64> = (0..k)
            .map(|c| self.imbalance - (self.imbalance - 1.0) * c as f64 / (k - 1).max(1) as f64)
            .collect();
        let sum: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|x| train_total as f64 * x / sum).collect();
        let mut train: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let missing = train_total - train.iter().sum::<usize>();
        for &c in order.iter().take(missing) {
            train[c] += 1;
        }
        train.into_iter().map(|t| [t, held, held]).collect()
    }
}

/// One clip of class `class`: a jittered tone plus band-limited noise (a sum
/// of random-phase partials around the class band) over faint white noise,
/// with short fades.
pub fn synth_clip(class: usize, sample_rate: u32, duration: f64, rng: &mut Rng) -> Vec<f32> {
    let sr = sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let tone = TONES_HZ[class] * (1.0 + rng.uniform_range(-0.03, 0.03));
    let tone_amp = rng.uniform_range(0.15, 0.3);
    let tone_phase = rng.uniform_range(0.0, TAU);
    let band = BANDS_HZ[class];
    let partials: Vec<(f64, f64)> = (0..16)
        .map(|_| (rng.uniform_range(0.85 * band, 1.15 * band), rng.uniform_range(0.0, TAU)))
        .collect();
    let band_amp = rng.uniform_range(0.1, 0.2) / (partials.len() as f64).sqrt();
    let fade = (0.01 * sr) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let mut x = tone_amp * (TAU * tone * t + tone_phase).sin();
            x += band_amp * partials.iter().map(|(f, p)| (TAU * f * t + p).sin()).sum::<f64>();
            x += rng.normal(0.0, 0.01);
            let edge = i.min(n - 1 - i);
            if edge < fade {
                x *= edge as f64 / fade as f64;
            }
            x.clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Write WAVs under `out_dir/wav/` and `out_dir/manifest.csv`; returns the
/// manifest path. Output depends only on the configuration.
pub fn synth(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let root = Rng::new(cfg.seed);
    let class_names: Vec<String> = (0..cfg.n_classes).map(|c| format!("class{c}")).collect();
    let mut samples = Vec::new();
    for (c, counts) in cfg.counts().into_iter().enumerate() {
        let dir = out_dir.join("wav").join(&class_names[c]);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut idx = 0u64;
        for (split, n) in [Split::Train, Split::Devel, Split::Test].into_iter().zip(counts) {
            for i in 0..n {
                let clip = synth_clip(c, cfg.sample_rate, cfg.duration, &mut root.split(c as u64).split(idx));
                idx += 1;
                let name = format!("{split}_{i:03}.wav");
                let path = dir.join(&name);
                std::fs::write(&path, encode_wav(&clip, cfg.sample_rate)?).map_err(|e| Error::io(&path, e))?;
                samples.push(LabeledSample {
                    source: format!("wav/{}/{name}", class_names[c]),
                    label: c,
                    split,
                });
            }
        }
    }
    let manifest = Manifest::new(samples, class_names)?;
    let path = out_dir.join("manifest.csv");
    std::fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
