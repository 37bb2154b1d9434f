//! Confusion-matrix accumulation, F1 scores, and report emission.
//!
//! Matrices are indexed by global class id (rows = ground truth, columns
//! = prediction) over the full label space, so the same matrix shape
//! serves every learning step. Classes a step has not introduced simply
//! have no support and drop out of the averages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayBase, Data, Ix2, Ix3, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelSpace, BACKGROUND};

/// Pixel-count confusion matrix with an optional skipped label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `[num_classes, num_classes]`, rows = ground truth, cols = prediction.
    counts: Array2<u64>,
    ignore_index: Option<u8>,
}

/// Per-class and averaged F1. `None` marks an undefined score
/// (no true or predicted pixels for the class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over foreground classes with (TP+FP+FN) > 0.
    pub macro_f1: Option<f64>,
    /// From pooled TP/FP/FN over foreground classes.
    pub micro_f1: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        Self::with_ignore(num_classes, None)
    }

    pub fn with_ignore(num_classes: usize, ignore_index: Option<u8>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("confusion matrix needs at least 2 classes"));
        }
        if let Some(ig) = ignore_index {
            if (ig as usize) < num_classes {
                return Err(Error::invalid(format!(
                    "ignore_index {ig} collides with a real class id"
                )));
            }
        }
        Ok(ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            ignore_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn count(&self, truth: u8, pred: u8) -> u64 {
        self.counts[[truth as usize, pred as usize]]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Ground-truth pixel count for a class.
    pub fn support(&self, class: u8) -> u64 {
        self.counts.row(class as usize).sum()
    }

    pub fn accumulate<S1, S2>(
        &mut self,
        pred: &ArrayBase<S1, Ix2>,
        truth: &ArrayBase<S2, Ix2>,
    ) -> Result<()>
    where
        S1: Data<Elem = u8>,
        S2: Data<Elem = u8>,
    {
        if pred.dim() != truth.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dim(),
                truth.dim()
            )));
        }
        let c = self.num_classes();
        let (h, w) = pred.dim();
        for y in 0..h {
            for x in 0..w {
                let (p, t) = (pred[[y, x]], truth[[y, x]]);
                if Some(t) == self.ignore_index || Some(p) == self.ignore_index {
                    continue;
                }
                if (t as usize) >= c || (p as usize) >= c {
                    return Err(Error::data(format!(
                        "class id out of range at ({y}, {x}): truth {t}, prediction {p}, {c} classes"
                    )));
                }
                self.counts[[t as usize, p as usize]] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise addition; shards evaluated in parallel merge losslessly.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes() != other.num_classes() || self.ignore_index != other.ignore_index {
            return Err(Error::invalid(
                "cannot merge confusion matrices with different class sets",
            ));
        }
        self.counts += &other.counts;
        Ok(())
    }

    fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.counts[[class, class]];
        let fp = self.counts.column(class).sum() - tp;
        let fn_ = self.counts.row(class).sum() - tp;
        (tp, fp, fn_)
    }

    /// Per-class F1 plus foreground macro and micro averages. The
    /// background's own F1 is reported but kept out of both averages.
    pub fn f1_scores(&self) -> F1Scores {
        let c = self.num_classes();
        let mut per_class = Vec::with_capacity(c);
        let mut macro_sum = 0.0;
        let mut macro_n = 0usize;
        let (mut ptp, mut pfp, mut pfn) = (0u64, 0u64, 0u64);
        for class in 0..c {
            let (tp, fp, fn_) = self.tp_fp_fn(class);
            if tp + fp + fn_ == 0 {
                per_class.push(None);
                continue;
            }
            let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            per_class.push(Some(f1));
            if class != BACKGROUND as usize {
                macro_sum += f1;
                macro_n += 1;
                ptp += tp;
                pfp += fp;
                pfn += fn_;
            }
        }
        let macro_f1 = (macro_n > 0).then(|| macro_sum / macro_n as f64);
        let micro_f1 =
            (ptp + pfp + pfn > 0).then(|| 2.0 * ptp as f64 / (2 * ptp + pfp + pfn) as f64);
        F1Scores {
            per_class,
            macro_f1,
            micro_f1,
        }
    }
}

/// Map per-pixel channel argmaxes to global class ids.
pub fn argmax_classes<A, S>(
    logits: &ArrayBase<S, Ix3>,
    channel_classes: &[u8],
) -> Result<Array2<u8>>
where
    A: NdFloat,
    S: Data<Elem = A>,
{
    let (c, h, w) = logits.dim();
    if c != channel_classes.len() {
        return Err(Error::shape(format!(
            "{c} logit channels but {} channel classes",
            channel_classes.len()
        )));
    }
    if c == 0 {
        return Err(Error::shape("no logit channels"));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[0, y, x]];
            for k in 1..c {
                let v = logits[[k, y, x]];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[[y, x]] = channel_classes[best];
        }
    }
    Ok(out)
}

/// One evaluated step: scores for every class seen so far, in
/// introduction order (background first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    /// `(class id, name, f1)` in introduction order.
    pub classes: Vec<(u8, String, Option<f64>)>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
}

impl MetricsReport {
    /// Assemble a report from a matrix. `order` lists the classes
    /// evaluated at this step (background first, then introduction order).
    pub fn from_matrix(
        step: usize,
        cm: &ConfusionMatrix,
        labels: &LabelSpace,
        order: &[u8],
    ) -> Result<Self> {
        if cm.num_classes() != labels.num_classes() {
            return Err(Error::shape(format!(
                "matrix covers {} classes, label space {}",
                cm.num_classes(),
                labels.num_classes()
            )));
        }
        if order.first() != Some(&BACKGROUND) {
            return Err(Error::invalid("class order must start with the background"));
        }
        let scores = cm.f1_scores();
        let mut classes = Vec::with_capacity(order.len());
        for &id in order {
            let name = labels
                .name_of(id)
                .ok_or_else(|| Error::invalid(format!("class id {id} not in label space")))?;
            classes.push((id, name.to_string(), scores.per_class[id as usize]));
        }
        Ok(MetricsReport {
            step,
            classes,
            macro_f1: scores.macro_f1,
            micro_f1: scores.micro_f1,
        })
    }

    /// Scores for a subset of classes, e.g. the previous steps' classes.
    pub fn subset_macro(&self, ids: &[u8]) -> Option<f64> {
        let lookup: BTreeMap<u8, Option<f64>> =
            self.classes.iter().map(|(id, _, f1)| (*id, *f1)).collect();
        let mut sum = 0.0;
        let mut n = 0usize;
        for id in ids {
            if let Some(Some(f1)) = lookup.get(id) {
                sum += f1;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

const SENTINEL: &str = "-";

fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(f) => format!("{f:.6}"),
        None => SENTINEL.to_string(),
    }
}

/// Write per-step tables, a cross-step summary, and curve data. Output
/// is deterministic, so re-emitting the same history is byte-identical.
/// Returns the written paths.
pub fn emit_report(dir: &Path, history: &[MetricsReport]) -> Result<Vec<PathBuf>> {
    if history.is_empty() {
        return Err(Error::invalid("history must contain at least one step"));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    for report in history {
        let mut csv = String::new();
        let mut header: Vec<String> = vec!["step".into()];
        let mut row: Vec<String> = vec![report.step.to_string()];
        for (_, name, f1) in &report.classes {
            header.push(name.clone());
            row.push(fmt_score(*f1));
        }
        header.push("macro_f1".into());
        header.push("micro_f1".into());
        row.push(fmt_score(report.macro_f1));
        row.push(fmt_score(report.micro_f1));
        csv.push_str(&header.join(","));
        csv.push('\n');
        csv.push_str(&row.join(","));
        csv.push('\n');
        let path = dir.join(format!("step{}_classwise.csv", report.step));
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    // Summary columns cover every class any step reported, in the
    // introduction order of the widest report.
    let widest = history
        .iter()
        .max_by_key(|r| r.classes.len())
        .expect("non-empty");
    let mut summary = String::new();
    let mut header: Vec<String> = vec!["step".into()];
    for (_, name, _) in &widest.classes {
        header.push(name.clone());
    }
    header.push("macro_f1".into());
    header.push("micro_f1".into());
    summary.push_str(&header.join(","));
    summary.push('\n');
    for report in history {
        let lookup: BTreeMap<u8, Option<f64>> = report
            .classes
            .iter()
            .map(|(id, _, f1)| (*id, *f1))
            .collect();
        let mut row: Vec<String> = vec![report.step.to_string()];
        for (id, _, _) in &widest.classes {
            row.push(match lookup.get(id) {
                Some(f1) => fmt_score(*f1),
                None => SENTINEL.to_string(),
            });
        }
        row.push(fmt_score(report.macro_f1));
        row.push(fmt_score(report.micro_f1));
        summary.push_str(&row.join(","));
        summary.push('\n');
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary)?;
    written.push(path);

    let mut curve = String::from("step,micro_f1,macro_f1\n");
    for report in history {
        curve.push_str(&format!(
            "{},{},{}\n",
            report.step,
            fmt_score(report.micro_f1),
            fmt_score(report.macro_f1)
        ));
    }
    let path = dir.join("curve.csv");
    std::fs::write(&path, curve)?;
    written.push(path);

    Ok(written)
}
