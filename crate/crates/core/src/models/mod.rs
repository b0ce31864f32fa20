//! The four classifiers: CNN baseline, sub-spectral classifier (SSC), vision
//! transformer over grid patches (ViT) and over vertical full-height
//! patches (VViT).
//!
//! Every model maps a batch `[B × n_mels × n_frames]` to logits
//! `[B × n_logits]`. One logit means a binary task scored with a sigmoid.

pub mod attention;
mod conv;
pub mod nn;
pub mod patch;
mod vit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Tensor, Var};

pub use attention::{attention, attention_weights, AttentionScale, MultiHead, TransformerBlock};
pub use conv::{Cnn, ConvStack, Ssc};
pub use patch::{grid_patchify, patchify, unpatchify, vertical_patchify, PatchLayout, PatchSequence};
pub use vit::Vit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cnn,
    Ssc,
    Vit,
    Vvit,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Cnn, Arch::Ssc, Arch::Vit, Arch::Vvit];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Cnn => "cnn",
            Arch::Ssc => "ssc",
            Arch::Vit => "vit",
            Arch::Vvit => "vvit",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Arch::Cnn),
            "ssc" => Ok(Arch::Ssc),
            "vit" => Ok(Arch::Vit),
            "vvit" => Ok(Arch::Vvit),
            other => Err(Error::invalid(format!("unknown arch {other:?} (cnn, ssc, vit, vvit)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// 1 for a binary task, the class count otherwise.
    pub n_logits: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub dropout: f64,
    pub embedding_size: usize,
    /// Width of the linear module between the class token and the classifier.
    pub lat_dim: usize,
    pub mlp_dim: usize,
    pub n_heads: usize,
    /// Per-head projection width; `embedding_size / n_heads` when unset.
    pub head_dim: Option<usize>,
    pub n_blocks: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub vpatch_width: usize,
    pub vpatch_stride: usize,
    pub attention_scale: AttentionScale,
    pub cnn_filters: Vec<usize>,
    pub cnn_fc: usize,
    pub ssc_bands: usize,
    pub ssc_filters: Vec<usize>,
    /// Hidden widths of the SSC head; the output layer is appended.
    pub ssc_mlp: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Vit,
            n_logits: 5,
            n_mels: 128,
            n_frames: 22,
            dropout: 0.2,
            embedding_size: 64,
            lat_dim: 64,
            mlp_dim: 128,
            n_heads: 4,
            head_dim: None,
            n_blocks: 4,
            patch_h: 16,
            patch_w: 16,
            vpatch_width: 7,
            vpatch_stride: 1,
            attention_scale: AttentionScale::HeadDim,
            cnn_filters: vec![32, 64, 128, 64],
            cnn_fc: 128,
            ssc_bands: 4,
            ssc_filters: vec![32, 64],
            ssc_mlp: vec![128, 64],
        }
    }
}

impl ModelConfig {
    /// Small configuration for 32×24 inputs: embedding 16, 2 blocks,
    /// 2 heads, 8×8 grid patches, 5-frame vertical patches and halved
    /// convolution widths.
    pub fn tiny(arch: Arch, n_logits: usize) -> Self {
        Self {
            arch,
            n_logits,
            n_mels: 32,
            n_frames: 24,
            dropout: 0.1,
            embedding_size: 16,
            lat_dim: 16,
            mlp_dim: 32,
            n_heads: 2,
            n_blocks: 2,
            patch_h: 8,
            patch_w: 8,
            vpatch_width: 5,
            cnn_filters: vec![16, 32, 64, 32],
            cnn_fc: 32,
            ssc_filters: vec![16, 32],
            ssc_mlp: vec![32, 16],
            ..Self::default()
        }
    }

    pub fn patch_layout(&self) -> Result<PatchLayout> {
        match self.arch {
            Arch::Vit => Ok(PatchLayout::Grid {
                patch_h: self.patch_h,
                patch_w: self.patch_w,
            }),
            Arch::Vvit => Ok(PatchLayout::Vertical {
                width: self.vpatch_width,
                stride: self.vpatch_stride,
            }),
            other => Err(Error::invalid(format!("{other} has no patch layout"))),
        }
    }

    /// Every violated invariant, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_logits == 0 {
            v.push("model.n_logits must be positive".into());
        }
        if self.n_mels == 0 || self.n_frames == 0 {
            v.push("model.n_mels and model.n_frames must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("model.dropout {} must be in [0, 1)", self.dropout));
        }
        match self.arch {
            Arch::Vit | Arch::Vvit => {
                for (name, val) in [
                    ("embedding_size", self.embedding_size),
                    ("lat_dim", self.lat_dim),
                    ("mlp_dim", self.mlp_dim),
                    ("n_heads", self.n_heads),
                ] {
                    if val == 0 {
                        v.push(format!("model.{name} must be positive"));
                    }
                }
                if self.n_heads > 0 {
                    if let Err(e) = attention::resolve_head_dim(self.embedding_size, self.n_heads, self.head_dim) {
                        v.push(format!("model: {e}"));
                    }
                }
                if let Err(e) = self.patch_layout().and_then(|l| l.geometry(self.n_mels, self.n_frames)) {
                    v.push(format!("model: {e}"));
                }
            }
            Arch::Cnn => {
                let need = 1usize << self.cnn_filters.len().min(30);
                if self.cnn_filters.is_empty() || self.cnn_filters.contains(&0) {
                    v.push("model.cnn_filters must be non-empty and positive".into());
                } else if self.n_mels < need || self.n_frames < need {
                    v.push(format!(
                        "model: {}x{} input is too small for {} pooling blocks (needs {need})",
                        self.n_mels,
                        self.n_frames,
                        self.cnn_filters.len()
                    ));
                }
                if self.cnn_fc == 0 {
                    v.push("model.cnn_fc must be positive".into());
                }
            }
            Arch::Ssc => {
                if self.ssc_bands == 0 || !self.n_mels.is_multiple_of(self.ssc_bands) {
                    v.push(format!(
                        "model.n_mels {} must be divisible by ssc_bands {}",
                        self.n_mels, self.ssc_bands
                    ));
                } else {
                    let need = 1usize << self.ssc_filters.len().min(30);
                    if self.n_mels / self.ssc_bands < need || self.n_frames < need {
                        v.push(format!(
                            "model: bands of {}x{} are too small for {} pooling blocks",
                            self.n_mels / self.ssc_bands,
                            self.n_frames,
                            self.ssc_filters.len()
                        ));
                    }
                }
                if self.ssc_filters.is_empty() || self.ssc_filters.contains(&0) || self.ssc_mlp.contains(&0) {
                    v.push("model.ssc_filters and ssc_mlp must be positive".into());
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
enum Net {
    Cnn(Cnn),
    Ssc(Ssc),
    Vit(Vit),
}

/// Model structure; the weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    net: Net,
}

impl Model {
    /// Register all parameters of `config` in `store`.
    pub fn new<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let net = match config.arch {
            Arch::Cnn => Net::Cnn(Cnn::new(store, config, rng)?),
            Arch::Ssc => Net::Ssc(Ssc::new(store, config, rng)?),
            Arch::Vit | Arch::Vvit => Net::Vit(Vit::new(store, config, rng)?),
        };
        Ok(Self {
            config: config.clone(),
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vit(&self) -> Option<&Vit> {
        match &self.net {
            Net::Vit(v) => Some(v),
            _ => None,
        }
    }

    /// Logits `[B × n_logits]` for `input: [B × n_mels × n_frames]`.
    /// In training mode batch-norm running statistics in `store` are updated.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        input: &Tensor<T>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let s = input.shape();
        if s.len() != 3 || s[1] != self.config.n_mels || s[2] != self.config.n_frames || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.n_mels, self.config.n_frames],
            });
        }
        match &self.net {
            Net::Vit(v) => v.forward(tape, store, input, rng, training),
            Net::Cnn(c) => {
                let x = tape.constant(input.clone().reshape([s[0], 1, s[1], s[2]])?);
                c.forward(tape, store, x, rng, training)
            }
            Net::Ssc(c) => {
                let x = tape.constant(input.clone().reshape([s[0], 1, s[1], s[2]])?);
                c.forward(tape, store, x, rng, training)
            }
        }
    }

    /// Eval-mode logits as plain values, one row per sample.
    pub fn predict_logits<T: Scalar>(&self, store: &mut ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let out = self.forward(&mut tape, store, input, &mut rng, false)?;
        let n = self.config.n_logits;
        Ok(tape.value(out).data().chunks(n).map(|r| r.iter().map(|v| v.f64()).collect()).collect())
    }
}

/// Predicted class from one row of logits: sigmoid ≥ 0.5 for a single
/// logit, argmax (first on ties) otherwise.
pub fn predict_class(logits: &[f64]) -> usize {
    if logits.len() == 1 {
        usize::from(logits[0] >= 0.0)
    } else {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Score of the positive class used for ROC curves: the sigmoid of a single
/// logit, or the softmax probability of class 1.
pub fn positive_score(logits: &[f64]) -> f64 {
    if logits.len() == 1 {
        crate::tensor::sigmoid(logits[0])
    } else {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        (logits[1] - max).exp() / z
    }
}

#[cfg(test)]
mod tests;
