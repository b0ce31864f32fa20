//! Scaled dot-product attention, multi-head attention and the pre-norm
//! transformer encoder block.

use serde::{Deserialize, Serialize};

use super::nn::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Var};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d_k)`, the per-head key dimension.
    #[default]
    HeadDim,
    /// `sqrt(n)`, the sequence length.
    SeqLen,
}

impl AttentionScale {
    fn factor(self, d_k: usize, n: usize) -> f64 {
        match self {
            AttentionScale::HeadDim => 1.0 / (d_k as f64).sqrt(),
            AttentionScale::SeqLen => 1.0 / (n as f64).sqrt(),
        }
    }
}

/// Row-stochastic attention weights `softmax(Q Kᵀ · scale)` over the key axis.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, scale: f64) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, T::of(scale));
    tape.softmax(logits, 1)
}

/// `softmax(Q Kᵀ · scale) V` for `Q: [n×d]`, `K: [m×d]`, `V: [m×d_v]`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    if tape.shape(v).len() != 2 || tape.shape(v)[0] != tape.shape(k)[0] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let w = attention_weights(tape, q, k, scale)?;
    tape.matmul(w, v)
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub head_dim: usize,
    pub scale: AttentionScale,
}

impl MultiHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        head_dim: Option<usize>,
        scale: AttentionScale,
        rng: &mut Rng,
    ) -> Result<Self> {
        let head_dim = resolve_head_dim(dim, n_heads, head_dim)?;
        let inner = n_heads * head_dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, inner, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, inner, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, inner, rng),
            out: Linear::new(store, &format!("{name}.out"), inner, dim, rng),
            n_heads,
            head_dim,
            scale,
        })
    }

    /// Self-attention over `batch` sequences of `seq` tokens stacked as
    /// `x: [batch·seq × dim]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if tape.shape(x)[0] != batch * seq {
            return Err(Error::invalid(format!(
                "multi-head input has {} rows, expected {batch}x{seq}",
                tape.shape(x)[0]
            )));
        }
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let scale = self.scale.factor(self.head_dim, seq);
        let mut samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let (qb, kb, vb) = (
                tape.narrow(q, 0, b * seq, seq)?,
                tape.narrow(k, 0, b * seq, seq)?,
                tape.narrow(v, 0, b * seq, seq)?,
            );
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let off = h * self.head_dim;
                let qh = tape.narrow(qb, 1, off, self.head_dim)?;
                let kh = tape.narrow(kb, 1, off, self.head_dim)?;
                let vh = tape.narrow(vb, 1, off, self.head_dim)?;
                heads.push(attention(tape, qh, kh, vh, scale)?);
            }
            samples.push(if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? });
        }
        let joined = if samples.len() == 1 { samples[0] } else { tape.concat(&samples, 0)? };
        self.out.forward(tape, store, joined)
    }
}

pub(crate) fn resolve_head_dim(dim: usize, n_heads: usize, head_dim: Option<usize>) -> Result<usize> {
    if n_heads == 0 {
        return Err(Error::invalid("n_heads must be positive"));
    }
    match head_dim {
        Some(0) => Err(Error::invalid("head_dim must be positive")),
        Some(d) => Ok(d),
        None if !dim.is_multiple_of(n_heads) => Err(Error::invalid(format!(
            "embedding size {dim} is not divisible by {n_heads} heads"
        ))),
        None => Ok(dim / n_heads),
    }
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `x + MLP(LN(x))` with
/// `MLP = FC(mlp_dim) → GELU → dropout → FC(dim) → dropout`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHead,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        head_dim: Option<usize>,
        mlp_dim: usize,
        dropout: f64,
        scale: AttentionScale,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHead::new(store, &format!("{name}.attn"), dim, n_heads, head_dim, scale, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_dim, dim, rng),
            dropout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        seq: usize,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h, batch, seq)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.dropout, rng, training)?;
        let h = self.fc2.forward(tape, store, h)?;
        let h = tape.dropout(h, self.dropout, rng, training)?;
        tape.add(x, h)
    }
}
