//! Dataset manifests and the class-balancing oversampler.
//!
//! An oversampled epoch has `max_c |train_c| × n_classes` draws. Each draw
//! picks a class uniformly, then a training sample of that class uniformly,
//! with replacement, so every class contributes the same expected number of
//! samples regardless of how rare it is.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Devel,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Devel, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Devel => "devel",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "devel" => Ok(Split::Devel),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, devel or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    /// File path, or an identifier for in-memory data.
    pub source: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    samples: Vec<LabeledSample>,
    class_names: Vec<String>,
    /// `counts[split][class]`
    counts: [Vec<usize>; 3],
}

impl Manifest {
    pub fn new(samples: Vec<LabeledSample>, class_names: Vec<String>) -> Result<Self> {
        let n = class_names.len();
        let mut counts = [vec![0; n], vec![0; n], vec![0; n]];
        for (i, s) in samples.iter().enumerate() {
            if s.label >= n {
                return Err(Error::invalid(format!(
                    "sample {i} ({}) has label {} but only {n} classes exist",
                    s.source, s.label
                )));
            }
            counts[s.split.index()][s.label] += 1;
        }
        Ok(Self {
            samples,
            class_names,
            counts,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self, split: Split) -> &[usize] {
        &self.counts[split.index()]
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,label,split\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.source, self.class_names[s.label], s.split));
        }
        out
    }
}

/// Parse a `path,label,split` CSV. Class names are the sorted unique labels.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let err = |line: usize, message: String| Error::Manifest { line, message };
    if text.trim().is_empty() {
        return Err(err(1, "empty manifest".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let fields: Vec<&str> = record.iter().collect();
        if fields == ["path", "label", "split"] {
            if header_seen {
                return Err(err(line, "duplicate header".into()));
            }
            header_seen = true;
            continue;
        }
        if !header_seen {
            return Err(err(line, format!("expected header path,label,split, found {fields:?}")));
        }
        if fields.len() != 3 {
            return Err(err(line, format!("expected 3 fields, found {}", fields.len())));
        }
        let split: Split = fields[2].parse().map_err(|m| err(line, m))?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err(line, "empty path or label".into()));
        }
        rows.push((fields[0].to_string(), fields[1].to_string(), split));
    }
    if !header_seen {
        return Err(err(1, "missing header".into()));
    }
    let mut class_names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let samples = rows
        .into_iter()
        .map(|(source, label, split)| LabeledSample {
            label: class_names.binary_search(&label).expect("label collected above"),
            source,
            split,
        })
        .collect();
    Manifest::new(samples, class_names)
}

/// Number of draws in one oversampled epoch: the largest training-class
/// count times the number of classes.
pub fn epoch_size(manifest: &Manifest) -> Result<usize> {
    let counts = manifest.class_counts(Split::Train);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {:?} has no training samples",
            manifest.class_names()[empty]
        )));
    }
    Ok(counts.iter().max().copied().unwrap_or(0) * manifest.n_classes())
}

/// Source of uniform indices; lets tests replace the generator with an
/// enumerating stub.
pub trait UniformIndex {
    fn below(&mut self, n: usize) -> usize;
}

impl UniformIndex for Rng {
    fn below(&mut self, n: usize) -> usize {
        Rng::below(self, n)
    }
}

/// Indices into `manifest.samples()` for one oversampled epoch.
pub fn draw_epoch_indices<R: UniformIndex>(manifest: &Manifest, rng: &mut R) -> Result<Vec<usize>> {
    let size = epoch_size(manifest)?;
    let mut by_class = vec![Vec::new(); manifest.n_classes()];
    for i in manifest.split_indices(Split::Train) {
        by_class[manifest.samples()[i].label].push(i);
    }
    Ok((0..size)
        .map(|_| {
            let class = &by_class[rng.below(by_class.len())];
            class[rng.below(class.len())]
        })
        .collect())
}

pub fn draw_epoch(manifest: &Manifest, rng: &mut Rng) -> Result<Vec<LabeledSample>> {
    Ok(draw_epoch_indices(manifest, rng)?
        .into_iter()
        .map(|i| manifest.samples()[i].clone())
        .collect())
}

/// Every training sample exactly once, shuffled. Used when oversampling is
/// switched off.
pub fn natural_epoch_indices(manifest: &Manifest, rng: &mut Rng) -> Vec<usize> {
    let mut idx = manifest.split_indices(Split::Train);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}
