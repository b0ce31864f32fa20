//! Parameterized layers. Each layer only holds [`ParamId`]s, so one model
//! description works with stores of any scalar type.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// `y = x W + b` with `W: [in × out]`, uniform init `±1/sqrt(in)`, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// `x: [N × in]` → `[N × out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// 3×3 convolution with padding 1, Kaiming-uniform weights.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_kaiming(format!("{name}.w"), &[c_out, c_in, 3, 3], c_in * 9, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([c_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, 1)
    }
}

/// Batch normalization over axis 1 with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], T::one())),
        }
    }

    /// Batch statistics (and a running-statistics update) when training,
    /// running statistics otherwise.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, training: bool) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        if !training {
            let mean = store.value(self.running_mean).data().to_vec();
            let var = store.value(self.running_var).data().to_vec();
            return tape.batch_norm_eval(x, g, b, &mean, &var);
        }
        let (y, stats) = tape.batch_norm_train(x, g, b)?;
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, s) in store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *s;
        }
        for (r, s) in store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *s;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}
