//! Evaluation metrics and the similarity kernel used by merge fitness.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    MicroF1,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::MicroF1 => "micro_f1",
        }
    }

    pub fn compute<S: AsRef<str>>(self, preds: &[S], golds: &[S], label_set: &[String]) -> Result<f64, MetricError> {
        match self {
            Metric::Accuracy => accuracy(preds, golds),
            Metric::MacroF1 => macro_f1(preds, golds, label_set),
            Metric::MicroF1 => micro_f1(preds, golds, label_set),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "micro_f1" => Ok(Metric::MicroF1),
            other => Err(MetricError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {preds} predictions vs {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

fn check_lengths<S>(preds: &[S], golds: &[S]) -> Result<(), MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy<S: AsRef<str>>(preds: &[S], golds: &[S]) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Per-class (tp, fp, fn) counts over `label_set`.
///
/// Gold labels must be in the label set. A prediction outside it is a false
/// positive for no class, but still a false negative for its gold class.
fn confusion<S: AsRef<str>>(
    preds: &[S],
    golds: &[S],
    label_set: &[String],
) -> Result<Vec<(u64, u64, u64)>, MetricError> {
    check_lengths(preds, golds)?;
    let index = |l: &str| label_set.iter().position(|x| x == l);
    let mut counts = vec![(0u64, 0u64, 0u64); label_set.len()];
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (p.as_ref(), g.as_ref());
        let gi = index(g).ok_or_else(|| MetricError::UnknownLabel(g.to_string()))?;
        if p == g {
            counts[gi].0 += 1;
        } else {
            counts[gi].2 += 1;
            if let Some(pi) = index(p) {
                counts[pi].1 += 1;
            }
        }
    }
    Ok(counts)
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Unweighted mean of per-class F1 over `label_set`. A class that is never
/// predicted and never gold scores 0.
pub fn macro_f1<S: AsRef<str>>(preds: &[S], golds: &[S], label_set: &[String]) -> Result<f64, MetricError> {
    let counts = confusion(preds, golds, label_set)?;
    if counts.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum::<f64>() / counts.len() as f64)
}

/// F1 over TP/FP/FN pooled across classes.
pub fn micro_f1<S: AsRef<str>>(preds: &[S], golds: &[S], label_set: &[String]) -> Result<f64, MetricError> {
    let counts = confusion(preds, golds, label_set)?;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |acc, &(a, b, c)| (acc.0 + a, acc.1 + b, acc.2 + c));
    Ok(f1(tp, fp, fn_))
}

/// Similarity between a predicted and a gold output, in `[0, 1]`.
pub trait SimilarityKernel: Send + Sync {
    fn similarity(&self, pred: &str, gold: &str) -> f64;
}

/// 1 on an exact match, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl SimilarityKernel for ExactMatch {
    fn similarity(&self, pred: &str, gold: &str) -> f64 {
        if pred == gold {
            1.0
        } else {
            0.0
        }
    }
}

impl<F> SimilarityKernel for F
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn similarity(&self, pred: &str, gold: &str) -> f64 {
        self(pred, gold)
    }
}

pub fn delta_similarity(pred: &str, gold: &str) -> f64 {
    ExactMatch.similarity(pred, gold)
}

/// Mean kernel value over aligned predictions and gold labels.
pub fn mean_similarity<S: AsRef<str>>(
    kernel: &dyn SimilarityKernel,
    preds: &[S],
    golds: &[S],
) -> Result<f64, MetricError> {
    check_lengths(preds, golds)?;
    let total: f64 = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| kernel.similarity(p.as_ref(), g.as_ref()))
        .sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn evaluate<S: AsRef<str>>(
        task_id: &str,
        metric: Metric,
        preds: &[S],
        golds: &[S],
        label_set: &[String],
    ) -> Result<Self, MetricError> {
        Ok(Self {
            task_id: task_id.to_string(),
            metric,
            value: metric.compute(preds, golds, label_set)?,
            n: preds.len(),
        })
    }
}

/// Writes reports as `task_id,metric,value,n`.
pub fn write_reports_csv<W: Write>(out: W, reports: &[EvalReport]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "task_id,metric,value,n")?;
    for r in reports {
        writeln!(w, "{},{},{},{}", r.task_id, r.metric, r.value, r.n)?;
    }
    w.flush()
}
