//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::tensor::{ParamStore, Rng, Tape, Tensor, Var};

/// Relative error with an absolute floor so that gradients near zero are
/// compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// `(tensor name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, name: &str, idx: usize, a: f64, n: f64) {
        let e = rel_err(a, n);
        self.probes += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((name.to_string(), idx, a, n));
        }
    }
}

fn probe_indices(n: usize, probes: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= probes {
        (0..n).collect()
    } else {
        // partial Fisher-Yates: distinct coordinates
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..probes {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(probes);
        idx
    }
}

/// Check the gradient of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, probes: usize, h: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = Rng::new(seed);
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for idx in probe_indices(inputs[k].numel(), probes, &mut rng) {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            report.record(&format!("input{k}"), idx, analytic.data()[idx], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Check the gradient of a scalar loss w.r.t. every trainable parameter in
/// `store`. `f` must be deterministic (recreate any rng inside).
pub fn check_params<F>(store: &ParamStore<f64>, f: F, probes: usize, h: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, &mut work)?;
    tape.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    tape.write_grads(&mut with_grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut scratch = s.clone();
        let mut tape = Tape::new();
        let out = f(&mut tape, &mut scratch)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rng = Rng::new(seed);
    let mut report = GradReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let analytic = with_grads
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        for idx in probe_indices(p.value.numel(), probes, &mut rng) {
            let orig = p.value.data()[idx];
            probe.get_mut(id).value.data_mut()[idx] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[idx] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[idx] = orig;
            report.record(&p.name, idx, analytic.data()[idx], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
