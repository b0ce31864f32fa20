use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::FrontendConfig;
use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::hpo::{Assignment, Dimension, SearchSpace, Strategy, TpeParams, Value};
use crate::models::{Arch, ModelConfig};
use crate::training::{Scheduler, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            cache_dir: PathBuf::from("cache"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub budget: usize,
    pub strategy: Strategy,
    pub tpe: TpeParams,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            strategy: Strategy::Tpe,
            tpe: TpeParams::default(),
            space: default_space(),
        }
    }
}

/// Architecture-independent search space. Bounds are workbench defaults,
/// not published values.
pub fn default_space() -> SearchSpace {
    let f = |min, max| Dimension::Uniform { min, max };
    SearchSpace {
        dims: [
            ("train.lr", Dimension::LogUniform { min: 1e-4, max: 1e-2 }),
            (
                "train.scheduler",
                Dimension::Categorical {
                    options: vec!["none".into(), "exponential".into()],
                },
            ),
            ("train.scheduler_base", f(0.88, 0.999)),
            ("model.dropout", f(0.0, 0.5)),
            ("augment.shift_ratio", f(0.0, 0.5)),
            ("augment.noise_ratio", f(0.0, 0.3)),
            ("augment.mask_ratio", f(0.0, 0.3)),
            ("augment.loudness_ratio", f(0.0, 0.3)),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_string(), d))
        .collect(),
    }
}

/// Everything one run needs, serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentParams::default(),
            paths: Paths::default(),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Tiny frontend and model for synthetic desk-scale runs.
    pub fn tiny(arch: Arch, n_classes: usize) -> Self {
        Self {
            frontend: FrontendConfig::tiny(),
            model: ModelConfig::tiny(arch, n_classes),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().trim().to_string()]))
    }

    /// Parse a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    /// Copy with every path made absolute, so a written config still points at
    /// the same files from wherever it is saved.
    pub fn with_absolute_paths(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let cwd = std::env::current_dir().map_err(|e| Error::io(Path::new("."), e))?;
        cfg.paths.rebase(&cwd);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Other(format!("serializing config: {e}")))
    }

    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        v.extend(self.frontend.violations());
        v.extend(self.model.violations());
        v.extend(self.train.violations());
        v.extend(self.augment.violations());
        v.extend(self.search.space.violations());
        if self.model.n_mels != self.frontend.n_mels {
            v.push(format!(
                "model.n_mels {} differs from frontend.n_mels {}",
                self.model.n_mels, self.frontend.n_mels
            ));
        }
        let frames = self.frontend.target_frames();
        if self.model.n_frames != frames {
            v.push(format!(
                "model.n_frames {} differs from the {frames} frames a {} s crop yields",
                self.model.n_frames, self.frontend.sample_length
            ));
        }
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                v.push(format!("paths.manifest {} does not exist", m.display()));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config(vec!["paths.manifest is not set (use --manifest or the config file)".into()]))
    }

    /// Copy of this config with a search assignment applied. Dimension names
    /// are dotted paths (`train.lr`, `model.embedding_size`, ...);
    /// `train.scheduler` (`none` | `exponential`) and `train.scheduler_base`
    /// together set the learning-rate schedule. Changing the frontend crop
    /// length resizes the model input to match.
    pub fn with_assignment(&self, a: &Assignment) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Other(e.to_string()))?;
        let (mut kind, mut base) = match self.train.scheduler {
            Scheduler::None => ("none".to_string(), None),
            Scheduler::Exponential { base } => ("exponential".to_string(), Some(base)),
        };
        for (name, value) in a {
            match name.as_str() {
                "train.scheduler" => kind = value.to_string(),
                "train.scheduler_base" => base = value.as_f64(),
                _ => set_path(&mut root, name, to_toml(value))?,
            }
        }
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().trim().to_string()]))?;
        cfg.train.scheduler = match (kind.as_str(), base) {
            ("none", _) => Scheduler::None,
            ("exponential", Some(base)) => Scheduler::Exponential { base },
            _ => {
                return Err(Error::Config(vec![format!(
                    "train.scheduler must be none or exponential (with train.scheduler_base), got {kind}"
                )]))
            }
        };
        if a.keys().any(|k| k.starts_with("frontend.")) {
            cfg.model.n_mels = cfg.frontend.n_mels;
            cfg.model.n_frames = cfg.frontend.target_frames();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = self.manifest.as_mut() {
            fix(m);
        }
        fix(&mut self.cache_dir);
        fix(&mut self.out_dir);
    }
}

/// Categorical options that read as numbers or booleans are written as such,
/// so `["16", "32"]` can drive an integer field.
fn to_toml(v: &Value) -> toml::Value {
    match v {
        Value::Int(i) => toml::Value::Integer(*i),
        Value::Float(f) => toml::Value::Float(*f),
        Value::Cat(s) => {
            if let Ok(i) = s.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = s.parse::<f64>() {
                toml::Value::Float(f)
            } else if let Ok(b) = s.parse::<bool>() {
                toml::Value::Boolean(b)
            } else {
                toml::Value::String(s.clone())
            }
        }
    }
}

fn set_path(root: &mut toml::Value, dotted: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(vec![format!("search dimension {dotted} does not name a config field")]);
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(unknown)?;
    let mut node = root;
    for p in parts {
        node = node.get_mut(p).ok_or_else(unknown)?;
    }
    node.as_table_mut().ok_or_else(unknown)?.insert(last.to_string(), value);
    Ok(())
}
