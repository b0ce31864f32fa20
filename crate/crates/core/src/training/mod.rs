//! Training loop, learning-rate schedule, evaluation and checkpoints.

mod adamw;

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{crop_or_pad, MelSpectrogram};
use crate::augment::{apply_all, AugmentParams};
use crate::error::{Error, Result};
use crate::metrics::{confusion, uar, ConfusionMatrix};
use crate::models::{positive_score, predict_class, Model, ModelConfig};
use crate::sampling::{draw_epoch_indices, natural_epoch_indices, Manifest, Split};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Rng, Tape, Tensor, Var};

pub use adamw::AdamW;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Softmax cross-entropy over `n_logits = n_classes` outputs.
    Multiclass,
    /// Sigmoid binary cross-entropy on a single logit.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scheduler {
    None,
    /// `lr = lr0 · base^epoch`.
    Exponential { base: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub task: Task,
    /// Class-balanced epochs. Turning this off trains on the natural class
    /// distribution, which is only useful as a diagnostic.
    pub oversample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
            scheduler: Scheduler::None,
            seed: 0,
            task: Task::Multiclass,
            oversample: true,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push(format!("train.batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("train.lr {} must be > 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("train.weight_decay {} must be >= 0", self.weight_decay));
        }
        if let Scheduler::Exponential { base } = self.scheduler {
            if !(0.88..1.0).contains(&base) {
                v.push(format!("train.scheduler.base {base} must be in [0.88, 1)"));
            }
        }
        v
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.scheduler {
        Scheduler::None => cfg.lr,
        Scheduler::Exponential { base } => cfg.lr * base.powi(epoch as i32),
    }
}

/// Mean loss of `logits: [B × n_logits]` against class labels.
pub fn loss(tape: &mut Tape<f32>, logits: Var, labels: &[usize], task: Task) -> Result<Var> {
    match task {
        Task::Multiclass => tape.cross_entropy(logits, labels),
        Task::Binary => {
            if tape.shape(logits).get(1) != Some(&1) {
                return Err(Error::invalid("binary task needs exactly one logit"));
            }
            tape.bce_with_logits(logits, labels)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub devel_uar: f64,
    pub lr: f64,
}

/// One JSON object per line.
pub fn history_to_string(history: &[HistoryEntry]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).expect("plain struct") + "\n")
        .collect()
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("history line: {e}"))))
        .collect()
}

/// Spectrograms aligned with `manifest.samples()`, already normalized so
/// that silence is 0.
pub struct Dataset {
    pub manifest: Manifest,
    pub specs: Vec<MelSpectrogram>,
}

impl Dataset {
    pub fn new(manifest: Manifest, specs: Vec<MelSpectrogram>) -> Result<Self> {
        if manifest.len() != specs.len() {
            return Err(Error::invalid(format!(
                "{} manifest rows but {} spectrograms",
                manifest.len(),
                specs.len()
            )));
        }
        Ok(Self { manifest, specs })
    }

    /// Eval-mode model inputs (center crop, no augmentation) and labels for
    /// one split.
    pub fn eval_inputs(&self, split: Split, n_frames: usize) -> (Vec<MelSpectrogram>, Vec<usize>) {
        let mut rng = Rng::new(0);
        self.manifest
            .split_indices(split)
            .into_iter()
            .map(|i| {
                (
                    crop_or_pad(&self.specs[i], n_frames, 0.0, &mut rng, false),
                    self.manifest.samples()[i].label,
                )
            })
            .unzip()
    }
}

fn stack(specs: &[&MelSpectrogram]) -> Result<Tensor<f32>> {
    let (h, w) = (specs[0].n_mels, specs[0].n_frames);
    let mut data = Vec::with_capacity(specs.len() * h * w);
    for s in specs {
        data.extend_from_slice(&s.values);
    }
    Tensor::new([specs.len(), h, w], data)
}

/// Predictions of a model over prepared inputs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub uar: f64,
    pub predictions: Vec<usize>,
    /// Positive-class scores (binary problems only).
    pub scores: Vec<f64>,
}

pub fn evaluate(
    model: &Model,
    store: &mut ParamStore<f32>,
    inputs: &[MelSpectrogram],
    labels: &[usize],
    n_classes: usize,
) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(inputs.len());
    let mut scores = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let refs: Vec<&MelSpectrogram> = chunk.iter().collect();
        for row in model.predict_logits(store, &stack(&refs)?)? {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "evaluation logits".into(),
                });
            }
            predictions.push(predict_class(&row));
            if n_classes == 2 {
                scores.push(positive_score(&row));
            }
        }
    }
    let cm = confusion(labels, &predictions, n_classes)?;
    Ok(Evaluation {
        uar: uar(&cm)?,
        confusion: cm,
        predictions,
        scores,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    /// Weights of the epoch with the best devel UAR (the initial weights
    /// when no epoch ran).
    pub best: ParamStore<f32>,
    pub best_epoch: Option<usize>,
    pub best_uar: Option<f64>,
    /// Weights after the last epoch.
    pub last: ParamStore<f32>,
    pub history: Vec<HistoryEntry>,
}

/// Split an epoch into batches, folding a trailing single sample into the
/// previous batch so batch statistics are always defined.
fn batches(draws: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = draws.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &draws[start..];
    }
    out
}

/// Check that model, task and dataset agree.
pub fn check_compatible(model_cfg: &ModelConfig, train_cfg: &TrainConfig, n_classes: usize) -> Result<()> {
    let mut v = model_cfg.violations();
    v.extend(train_cfg.violations());
    match train_cfg.task {
        Task::Binary if n_classes != 2 || model_cfg.n_logits != 1 => v.push(format!(
            "binary task needs 2 classes and n_logits = 1, got {n_classes} classes and n_logits = {}",
            model_cfg.n_logits
        )),
        Task::Multiclass if model_cfg.n_logits != n_classes => v.push(format!(
            "multiclass task needs n_logits = {n_classes} (class count), got {}",
            model_cfg.n_logits
        )),
        _ => {}
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

/// Train with devel-UAR model selection. `on_epoch` sees every history entry
/// as it is produced.
pub fn train(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    augment: &AugmentParams,
    on_epoch: &mut dyn FnMut(&HistoryEntry),
) -> Result<TrainOutcome> {
    let n_classes = data.manifest.n_classes();
    check_compatible(model_cfg, train_cfg, n_classes)?;
    let aug_problems = augment.violations();
    if !aug_problems.is_empty() {
        return Err(Error::Config(aug_problems));
    }
    if let Some(bad) = data.specs.iter().find(|s| s.n_mels != model_cfg.n_mels) {
        return Err(Error::invalid(format!(
            "{} has {} mel bands but the model expects {}",
            bad.source_id, bad.n_mels, model_cfg.n_mels
        )));
    }
    let (devel_inputs, devel_labels) = data.eval_inputs(Split::Devel, model_cfg.n_frames);
    if devel_inputs.is_empty() {
        return Err(Error::invalid("devel split is empty"));
    }
    if data.manifest.split_indices(Split::Train).is_empty() {
        return Err(Error::invalid("train split is empty"));
    }

    let root = Rng::new(train_cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(model_cfg, &mut store, &mut root.split(0))?;
    let mut opt = AdamW::new(train_cfg.weight_decay);
    let mut best = store.clone();
    let (mut best_epoch, mut best_uar) = (None, None);
    let mut history = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let e = epoch as u64;
        let lr = lr_at(epoch, train_cfg);
        let mut draw_rng = root.split(1).split(e);
        let draws = if train_cfg.oversample {
            draw_epoch_indices(&data.manifest, &mut draw_rng)?
        } else {
            natural_epoch_indices(&data.manifest, &mut draw_rng)
        };
        let sample_root = root.split(2).split(e);
        let dropout_root = root.split(3).split(e);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut pos = 0u64;
        for (b, batch) in batches(&draws, train_cfg.batch_size).into_iter().enumerate() {
            let inputs: Vec<MelSpectrogram> = batch
                .iter()
                .map(|&i| {
                    let mut rng = sample_root.split(pos);
                    pos += 1;
                    let cropped = crop_or_pad(&data.specs[i], model_cfg.n_frames, 0.0, &mut rng, true);
                    apply_all(&cropped, augment, &mut rng)
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.manifest.samples()[i].label).collect();
            let refs: Vec<&MelSpectrogram> = inputs.iter().collect();
            let x = stack(&refs)?;
            let mut tape = Tape::new();
            let mut rng = dropout_root.split(b as u64);
            let logits = model.forward(&mut tape, &mut store, &x, &mut rng, true)?;
            let l = loss(&mut tape, logits, &labels, train_cfg.task)?;
            let lv = tape.value(l).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at epoch {epoch}, batch {b}"),
                });
            }
            tape.backward(l)?;
            store.zero_grad();
            tape.write_grads(&mut store);
            opt.step(&mut store, lr)?;
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let eval = evaluate(&model, &mut store, &devel_inputs, &devel_labels, n_classes)?;
        let entry = HistoryEntry {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            devel_uar: eval.uar,
            lr,
        };
        on_epoch(&entry);
        if best_uar.is_none_or(|b| eval.uar > b) {
            best_uar = Some(eval.uar);
            best_epoch = Some(epoch);
            best = store.clone();
        }
        history.push(entry);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_uar,
        last: store,
        history,
    })
}

/// Write every parameter and buffer plus the model configuration.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    store: &ParamStore<f32>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut meta = extra.clone();
    meta.insert("kind".into(), "model".into());
    meta.insert(
        "model_config".into(),
        serde_json::to_string(model.config()).map_err(|e| Error::Other(e.to_string()))?,
    );
    let entries: Vec<(String, Tensor<f32>)> = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &entries, &meta)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamStore<f32>, BTreeMap<String, String>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (entries, meta) = read_checkpoint(BufReader::new(f))?;
    let cfg: ModelConfig = meta
        .get("model_config")
        .ok_or_else(|| Error::Checkpoint(format!("{} has no model configuration", path.display())))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string())))?;
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store, &mut Rng::new(0))?;
    store.load(entries)?;
    Ok((model, store, meta))
}
