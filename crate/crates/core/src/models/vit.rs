//! Vision transformer over grid or vertical spectrogram patches.

use super::attention::TransformerBlock;
use super::nn::{LayerNorm, Linear};
use super::patch::{patchify, PatchLayout};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Vit {
    pub layout: PatchLayout,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub embed: Linear,
    pub class_token: ParamId,
    /// `[(n_patches + 1) × embedding_size]`, row 0 belongs to the class token.
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub head_norm: LayerNorm,
    pub head_fc: Linear,
    pub classifier: Linear,
    pub dropout: f64,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl Vit {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let layout = cfg.patch_layout()?;
        let (n_patches, patch_dim) = layout.geometry(cfg.n_mels, cfg.n_frames)?;
        let e = cfg.embedding_size;
        let embed = Linear::new(store, "vit.embed", patch_dim, e, rng);
        let class_token = store.add_normal("vit.class_token", &[1, e], 0.02, rng);
        let positions = store.add_normal("vit.positions", &[n_patches + 1, e], 0.02, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("vit.block{i}"),
                    e,
                    cfg.n_heads,
                    cfg.head_dim,
                    cfg.mlp_dim,
                    cfg.dropout,
                    cfg.attention_scale,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout,
            n_patches,
            patch_dim,
            embed,
            class_token,
            positions,
            blocks,
            head_norm: LayerNorm::new(store, "vit.head.norm", e),
            head_fc: Linear::new(store, "vit.head.fc", e, cfg.lat_dim, rng),
            classifier: Linear::new(store, "vit.classifier", cfg.lat_dim, cfg.n_logits, rng),
            dropout: cfg.dropout,
            n_mels: cfg.n_mels,
            n_frames: cfg.n_frames,
        })
    }

    /// Stack the patches of every sample of `input: [B×H×W]` into
    /// `[B·n_patches × patch_dim]`.
    pub fn patch_matrix<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = input.shape()[0];
        let per = self.n_mels * self.n_frames;
        let mut data = Vec::with_capacity(batch * self.n_patches * self.patch_dim);
        for b in 0..batch {
            let seq = patchify(&input.data()[b * per..(b + 1) * per], self.n_mels, self.n_frames, self.layout)?;
            data.extend(seq.patches);
        }
        Tensor::new([batch * self.n_patches, self.patch_dim], data)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let patches = self.patch_matrix(input)?;
        let batch = input.shape()[0];
        let p = tape.constant(patches);
        self.forward_patches(tape, store, p, batch, rng, training)
    }

    /// Everything after patch extraction. `patches: [B·n_patches × patch_dim]`.
    pub fn forward_patches<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: Var,
        batch: usize,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let n = self.n_patches;
        if tape.shape(patches) != [batch * n, self.patch_dim] {
            return Err(Error::ShapeMismatch {
                op: "vit patches",
                lhs: tape.shape(patches).to_vec(),
                rhs: vec![batch * n, self.patch_dim],
            });
        }
        let tokens = self.embed.forward(tape, store, patches)?;
        let cls = tape.param(store, self.class_token);
        let pos = tape.param(store, self.positions);
        let seq = n + 1;
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let t = tape.narrow(tokens, 0, b * n, n)?;
            let t = tape.concat(&[cls, t], 0)?;
            rows.push(tape.add(t, pos)?);
        }
        let mut x = if batch == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        x = tape.dropout(x, self.dropout, rng, training)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, batch, seq, rng, training)?;
        }
        let heads: Vec<Var> = (0..batch)
            .map(|b| tape.narrow(x, 0, b * seq, 1))
            .collect::<Result<_>>()?;
        let h = if batch == 1 { heads[0] } else { tape.concat(&heads, 0)? };
        let h = self.head_norm.forward(tape, store, h)?;
        let h = tape.dropout(h, self.dropout, rng, training)?;
        let h = self.head_fc.forward(tape, store, h)?;
        let h = tape.gelu(h);
        self.classifier.forward(tape, store, h)
    }
}
