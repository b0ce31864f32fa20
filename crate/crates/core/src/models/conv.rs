//! Convolutional models: the CNN baseline and the sub-spectral classifier.

use super::nn::{BatchNorm, Conv3x3, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Var};

/// `batchnorm → dropout → conv3×3 → maxpool 2×2 → GELU`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub bn: BatchNorm,
    pub conv: Conv3x3,
}

impl ConvBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_in),
            conv: Conv3x3::new(store, &format!("{name}.conv"), c_in, c_out, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        dropout: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let h = self.bn.forward(tape, store, x, training)?;
        let h = tape.dropout(h, dropout, rng, training)?;
        let h = self.conv.forward(tape, store, h)?;
        let h = tape.maxpool2d(h, 2)?;
        Ok(tape.gelu(h))
    }
}

/// A stack of conv blocks over a `[B×1×H×W]` input, flattened to `[B × F]`.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlock>,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvStack {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        filters: &[usize],
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shrink = 1usize << filters.len();
        if height < shrink || width < shrink {
            return Err(Error::invalid(format!(
                "{height}x{width} input is too small for {} 2x2 pools",
                filters.len()
            )));
        }
        let mut c_in = 1;
        let mut blocks = Vec::new();
        for (i, &f) in filters.iter().enumerate() {
            blocks.push(ConvBlock::new(store, &format!("{name}.block{i}"), c_in, f, rng));
            c_in = f;
        }
        let (mut h, mut w) = (height, width);
        for _ in filters {
            h /= 2;
            w /= 2;
        }
        Ok(Self {
            blocks,
            out_channels: c_in,
            out_h: h,
            out_w: w,
        })
    }

    pub fn out_features(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        dropout: f64,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h, dropout, rng, training)?;
        }
        let s = tape.shape(h).to_vec();
        tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])
    }
}

#[derive(Clone, Debug)]
pub struct Cnn {
    pub stack: ConvStack,
    pub bn: BatchNorm,
    pub fc: Linear,
    pub classifier: Linear,
    pub dropout: f64,
}

impl Cnn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let stack = ConvStack::new(store, "cnn", &cfg.cnn_filters, cfg.n_mels, cfg.n_frames, rng)?;
        let flat = stack.out_features();
        Ok(Self {
            stack,
            bn: BatchNorm::new(store, "cnn.head.bn", flat),
            fc: Linear::new(store, "cnn.head.fc", flat, cfg.cnn_fc, rng),
            classifier: Linear::new(store, "cnn.classifier", cfg.cnn_fc, cfg.n_logits, rng),
            dropout: cfg.dropout,
        })
    }

    /// `x: [B×1×H×W]` → logits `[B × n_logits]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let h = self.stack.forward(tape, store, x, self.dropout, rng, training)?;
        let h = self.bn.forward(tape, store, h, training)?;
        let h = tape.dropout(h, self.dropout, rng, training)?;
        let h = self.fc.forward(tape, store, h)?;
        let h = tape.gelu(h);
        self.classifier.forward(tape, store, h)
    }
}

/// One small CNN per contiguous mel band, concatenated into an MLP head.
#[derive(Clone, Debug)]
pub struct Ssc {
    pub bands: Vec<ConvStack>,
    pub band_height: usize,
    pub mlp: Vec<Linear>,
    pub dropout: f64,
}

impl Ssc {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.ssc_bands == 0 || !cfg.n_mels.is_multiple_of(cfg.ssc_bands) {
            return Err(Error::invalid(format!(
                "n_mels {} is not divisible into {} bands",
                cfg.n_mels, cfg.ssc_bands
            )));
        }
        let band_height = cfg.n_mels / cfg.ssc_bands;
        let bands = (0..cfg.ssc_bands)
            .map(|i| ConvStack::new(store, &format!("ssc.band{i}"), &cfg.ssc_filters, band_height, cfg.n_frames, rng))
            .collect::<Result<Vec<_>>>()?;
        let per_band = bands[0].out_features();
        let mut dims = vec![per_band * cfg.ssc_bands];
        dims.extend(&cfg.ssc_mlp);
        dims.push(cfg.n_logits);
        let mlp = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("ssc.mlp{i}"), d[0], d[1], rng))
            .collect();
        Ok(Self {
            bands,
            band_height,
            mlp,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let mut embeddings = Vec::with_capacity(self.bands.len());
        for (i, band) in self.bands.iter().enumerate() {
            let rows = tape.narrow(x, 2, i * self.band_height, self.band_height)?;
            embeddings.push(band.forward(tape, store, rows, self.dropout, rng, training)?);
        }
        let mut h = if embeddings.len() == 1 {
            embeddings[0]
        } else {
            tape.concat(&embeddings, 1)?
        };
        let last = self.mlp.len() - 1;
        for (i, layer) in self.mlp.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.gelu(h);
                h = tape.dropout(h, self.dropout, rng, training)?;
            }
        }
        Ok(h)
    }
}
