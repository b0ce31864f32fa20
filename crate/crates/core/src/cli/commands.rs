use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::prepare::{load_dataset, prepare, PrepareReport};
use crate::audio::{crop_or_pad, MelSpectrogram};
use crate::augment::apply_all;
use crate::error::{Error, Result};
use crate::hpo::{run_search, Trial, TrialStatus};
use crate::metrics::{report, roc_points};
use crate::sampling::Split;
use crate::tensor::Rng;
use crate::training::{evaluate, history_to_string, load_checkpoint, save_checkpoint, train, Dataset, Evaluation};

pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Fully expanded config next to a run's outputs.
pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(RESOLVED_CONFIG);
    write(&path, cfg.with_absolute_paths()?.to_toml()?)?;
    Ok(path)
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareReport> {
    cfg.validate()?;
    let report = prepare(cfg.manifest()?, &cfg.frontend, &cfg.paths.cache_dir)?;
    if report.failed.is_empty() {
        Ok(report)
    } else {
        Err(Error::Files(report.failed))
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(cfg.manifest()?, &cfg.frontend, &cfg.paths.cache_dir)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    pub best_uar: Option<f64>,
    pub out_dir: PathBuf,
}

/// Train on the manifest's train split with devel selection; writes
/// `history.log`, `best.ckpt`, `metrics.txt` and the resolved config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.paths.out_dir.clone();
    write_resolved(cfg, &out)?;
    let data = dataset(cfg)?;
    let history_path = out.join("history.log");
    let mut log = std::fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut log_err = None;
    let outcome = train(&data, &cfg.model, &cfg.train, &cfg.augment, &mut |entry| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  devel uar {:.4}  lr {:.3e}",
            entry.epoch, entry.train_loss, entry.devel_uar, entry.lr
        );
        if log_err.is_none() {
            if let Err(e) = log.write_all(history_to_string(std::slice::from_ref(entry)).as_bytes()) {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&history_path, e));
    }
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.train.seed.to_string());
    if let (Some(e), Some(u)) = (outcome.best_epoch, outcome.best_uar) {
        meta.insert("best_epoch".to_string(), e.to_string());
        meta.insert("best_devel_uar".to_string(), format!("{u:.6}"));
    }
    save_checkpoint(&out.join("best.ckpt"), &outcome.model, &outcome.best, &meta)?;

    let mut best = outcome.best;
    let (inputs, labels) = data.eval_inputs(Split::Devel, cfg.model.n_frames);
    let eval = evaluate(&outcome.model, &mut best, &inputs, &labels, data.manifest.n_classes())?;
    let roc = binary_roc(&eval, &labels)?;
    let header = format!(
        "split = devel\nbest_epoch = {}\n",
        outcome.best_epoch.map_or("none".to_string(), |e| e.to_string())
    );
    let text = report(&eval.confusion, data.manifest.class_names(), roc.as_ref())?;
    write(&out.join("metrics.txt"), header + &text)?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_uar: outcome.best_uar,
        out_dir: out,
    })
}

fn binary_roc(eval: &Evaluation, labels: &[usize]) -> Result<Option<crate::metrics::Roc>> {
    if eval.scores.is_empty() || !labels.contains(&0) || !labels.contains(&1) {
        return Ok(None);
    }
    roc_points(&eval.scores, labels).map(Some)
}

/// Score a checkpoint on one split; writes `metrics.txt`, `confusion.csv`
/// and, for two-class problems, `roc.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Evaluation> {
    cfg.validate()?;
    let (model, mut store, _) = load_checkpoint(checkpoint)?;
    let mc = model.config();
    if mc.n_mels != cfg.frontend.n_mels {
        return Err(Error::Config(vec![format!(
            "checkpoint expects {} mel bands but the frontend produces {}",
            mc.n_mels, cfg.frontend.n_mels
        )]));
    }
    let data = dataset(cfg)?;
    let (inputs, labels) = data.eval_inputs(split, mc.n_frames);
    if inputs.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    let eval = evaluate(&model, &mut store, &inputs, &labels, data.manifest.n_classes())?;
    let roc = binary_roc(&eval, &labels)?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let names = data.manifest.class_names();
    let header = format!("split = {split}\ncheckpoint = {}\n", checkpoint.display());
    write(&out.join("metrics.txt"), header + &report(&eval.confusion, names, roc.as_ref())?)?;
    write(&out.join("confusion.csv"), eval.confusion.to_csv(names))?;
    if let Some(roc) = &roc {
        write(&out.join("roc.csv"), roc.to_csv())?;
    }
    Ok(eval)
}

/// Hyper-parameter search over `cfg.search.space`, each trial a full
/// training run scored by best devel UAR. Writes `trials.log` (resumed if
/// present) and `best-config.toml`.
pub fn cmd_search(cfg: &RunConfig) -> Result<Vec<Trial>> {
    cfg.validate()?;
    if let Some(bad) = cfg
        .search
        .space
        .dims
        .keys()
        .find(|k| k.starts_with("frontend.") && k.as_str() != "frontend.sample_length")
    {
        return Err(Error::Config(vec![format!(
            "search dimension {bad}: only frontend.sample_length may vary (other frontend settings change the cache)"
        )]));
    }
    let out = &cfg.paths.out_dir;
    write_resolved(cfg, out)?;
    let data = dataset(cfg)?;
    let log = out.join("trials.log");
    let trials = run_search(
        &cfg.search.space,
        |id, a| {
            let trial_cfg = cfg.with_assignment(a)?;
            let outcome = train(&data, &trial_cfg.model, &trial_cfg.train, &trial_cfg.augment, &mut |_| {})?;
            let uar = outcome.best_uar.ok_or_else(|| Error::invalid("trial ran zero epochs"))?;
            eprintln!("trial {id:>4}  devel uar {uar:.4}");
            Ok(uar)
        },
        cfg.search.budget,
        cfg.train.seed,
        cfg.search.strategy,
        &cfg.search.tpe,
        Some(&log),
    )?;
    if let Some(best) = trials.iter().find(|t| t.status == TrialStatus::Complete) {
        let best_cfg = cfg.with_assignment(&best.assignment)?;
        write(&out.join("best-config.toml"), best_cfg.with_absolute_paths()?.to_toml()?)?;
    }
    Ok(trials)
}

/// Binary PGM, low mel bands at the bottom, `[0, 1]` mapped to `0..=255`.
pub fn encode_pgm(spec: &MelSpectrogram) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", spec.n_frames, spec.n_mels).into_bytes();
    for m in (0..spec.n_mels).rev() {
        for t in 0..spec.n_frames {
            out.push((spec.get(m, t).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Before/after augmentation images for the first `k` train samples.
pub fn cmd_preview(cfg: &RunConfig, k: usize) -> Result<Vec<(PathBuf, PathBuf)>> {
    cfg.validate()?;
    let data = dataset(cfg)?;
    let dir = cfg.paths.out_dir.join("preview");
    create_dir(&dir)?;
    let root = Rng::new(cfg.train.seed);
    let mut written = Vec::new();
    for (n, i) in data.manifest.split_indices(Split::Train).into_iter().take(k).enumerate() {
        let mut rng = root.split(n as u64);
        let before = crop_or_pad(&data.specs[i], cfg.model.n_frames, 0.0, &mut rng, false);
        let after = apply_all(&before, &cfg.augment, &mut rng);
        let (b, a) = (dir.join(format!("{n:03}_before.pgm")), dir.join(format!("{n:03}_after.pgm")));
        write(&b, encode_pgm(&before))?;
        write(&a, encode_pgm(&after))?;
        written.push((b, a));
    }
    Ok(written)
}
