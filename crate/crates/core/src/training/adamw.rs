use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Adam with decoupled weight decay. Parameters without a gradient (never
/// reached by backward) are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`:
    /// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for p in store.iter().filter(|p| p.trainable) {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {}", p.name),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            let (true, Some(g)) = (p.trainable, &p.grad) else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.f64();
                let mk = b1 * md[k].f64() + (1.0 - b1) * gk;
                let vk = b2 * vd[k].f64() + (1.0 - b2) * gk * gk;
                md[k] = T::of(mk);
                vd[k] = T::of(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *w = *w * decay - T::of(update);
            }
        }
        Ok(())
    }
}
