//! Confusion matrices, unweighted average recall and ROC curves.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, k: u64) {
        self.counts[truth * self.n_classes + pred] += k;
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n_classes..(truth + 1) * self.n_classes].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    /// Recall of each true class. Errors if a class has no samples.
    pub fn recalls(&self) -> Result<Vec<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let n = self.row_sum(c);
                if n == 0 {
                    Err(Error::invalid(format!("class {c} has no samples; recall is undefined")))
                } else {
                    Ok(self.get(c, c) as f64 / n as f64)
                }
            })
            .collect()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut out = String::from("true\\pred");
        for c in 0..self.n_classes {
            let _ = write!(out, ",{}", name(c));
        }
        out.push('\n');
        for t in 0..self.n_classes {
            out.push_str(&name(t));
            for p in 0..self.n_classes {
                let _ = write!(out, ",{}", self.get(t, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Count `(label, prediction)` pairs.
pub fn confusion(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::invalid(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in labels.iter().zip(predictions) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::invalid(format!("class index ({t}, {p}) out of range for {n_classes} classes")));
        }
        cm.add(t, p, 1);
    }
    Ok(cm)
}

/// Unweighted average recall: the mean of per-class recalls.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.n_classes() == 0 {
        return Err(Error::invalid("empty confusion matrix"));
    }
    let r = cm.recalls()?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roc {
    /// `(fpr, tpr)`, from `(0, 0)` to `(1, 1)`, sorted by fpr.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl Roc {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        out
    }
}

/// ROC curve of a binary scorer. Samples sharing a score move together,
/// which gives ties half credit in the trapezoidal area.
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("roc_points needs binary labels"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc_points needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalized at the end
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(Roc {
        points,
        auc: auc / (n_pos as f64 * n_neg as f64),
    })
}

/// Plain-text metrics report.
pub fn report(cm: &ConfusionMatrix, class_names: &[String], roc: Option<&Roc>) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "uar = {:.6}", uar(cm)?);
    let _ = writeln!(out, "samples = {}", cm.total());
    for (c, r) in cm.recalls()?.iter().enumerate() {
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let _ = writeln!(out, "recall[{name}] = {r:.6}");
    }
    if let Some(roc) = roc {
        let _ = writeln!(out, "auc = {:.6}", roc.auc);
    }
    out.push_str("confusion (rows = true, cols = predicted):\n");
    for row in cm.rows() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "  {}", cells.join(" "));
    }
    Ok(out)
}
