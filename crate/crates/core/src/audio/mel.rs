use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrontendConfig, MelSpectrogram};
use crate::error::{Error, Result};

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Area-normalized triangular filters over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    /// `[n_mels × n_bins]`, row-major.
    weights: Vec<f64>,
    /// Band edges in Hz, `n_mels + 2` entries.
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect();
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (right - left);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                let w = rise.min(fall).max(0.0);
                weights[m * n_bins + k] = w * norm;
            }
        }
        Self {
            n_mels,
            n_bins,
            weights,
            edges_hz,
        }
    }

    pub fn from_config(cfg: &FrontendConfig) -> Self {
        Self::new(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    }

    /// Center frequency of each filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable STFT + filterbank for one frontend configuration.
pub struct MelFrontend {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n = cfg.n_fft;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        Self {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(n),
            window,
            filterbank: MelFilterbank::from_config(cfg),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Log-mel spectrogram: Hann-windowed STFT without centering, power
    /// spectrum, mel filterbank, then `ln(max(power, log_floor))`.
    pub fn compute(&self, samples: &[f32], source_id: &str) -> Result<MelSpectrogram> {
        let (n_fft, hop, n_mels) = (self.cfg.n_fft, self.cfg.hop_length, self.cfg.n_mels);
        if samples.len() < n_fft {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one FFT window ({n_fft})",
                samples.len()
            )));
        }
        let n_frames = 1 + (samples.len() - n_fft) / hop;
        let n_bins = n_fft / 2 + 1;
        let floor = self.cfg.log_floor;
        let mut values = vec![0f32; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut mel = vec![0.0; n_mels];
        for t in 0..n_frames {
            let frame = &samples[t * hop..t * hop + n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            for (m, &e) in mel.iter().enumerate() {
                values[m * n_frames + t] = e.max(floor).ln() as f32;
            }
        }
        Ok(MelSpectrogram {
            values,
            n_mels,
            n_frames,
            sample_rate: self.cfg.sample_rate,
            hop_length: hop,
            source_id: source_id.to_string(),
        })
    }
}

pub fn mel_spectrogram(samples: &[f32], cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg).compute(samples, "")
}
