//! Confusion-matrix accumulation, macro F1, per-class accuracy, the
//! two-head decision rule, and the serialized run report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::{Error, Result};

/// Confusion counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCounts {
    confusion: Vec<Vec<u64>>,
}

impl EvalCounts {
    pub fn new(n_classes: usize) -> Self {
        assert!(n_classes >= 1);
        EvalCounts {
            confusion: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.confusion[true_class][predicted] += 1;
    }

    pub fn confusion(&self) -> &Vec<Vec<u64>> {
        &self.confusion
    }

    pub fn n(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Elementwise addition; merging partial counts from parallel workers.
    pub fn merge(&mut self, other: &EvalCounts) {
        assert_eq!(self.n_classes(), other.n_classes());
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn total_accuracy(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        let hits: u64 = (0..self.n_classes()).map(|k| self.confusion[k][k]).sum();
        hits as f64 / n as f64
    }
}

/// Macro F1: per-class `2PR/(P+R)` averaged over all classes of the matrix,
/// with any class whose precision/recall is undefined (zero denominator) or
/// whose `P + R = 0` contributing 0.
pub fn macro_f1(counts: &EvalCounts) -> f64 {
    let c = counts.n_classes();
    let mut sum = 0.0;
    for k in 0..c {
        let tp = counts.confusion[k][k] as f64;
        let support: u64 = counts.confusion[k].iter().sum();
        let predicted: u64 = (0..c).map(|r| counts.confusion[r][k]).sum();
        if support == 0 || predicted == 0 {
            continue; // undefined P or R -> zero contribution
        }
        let precision = tp / predicted as f64;
        let recall = tp / support as f64;
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / c as f64
}

/// Per-class accuracy (recall): diagonal over row sum. Classes with zero
/// support are reported as `None`, not as 0.
pub fn per_class_accuracy(counts: &EvalCounts) -> Vec<Option<f64>> {
    (0..counts.n_classes())
        .map(|k| {
            let support: u64 = counts.confusion[k].iter().sum();
            if support == 0 {
                None
            } else {
                Some(counts.confusion[k][k] as f64 / support as f64)
            }
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Two-head decision rule: if the fluent head's argmax is Fluent the output
/// is Fluent; otherwise the disfluent head's argmax decides, with its Fluent
/// coordinate excluded so the gate cannot be contradicted.
///
/// `fluent_probs` is over (Fluent, Disfluent) in that order; ties go to the
/// earlier index.
pub fn combined_prediction(fluent_probs: &[f64], disfluent_probs: &[f64]) -> Label {
    debug_assert_eq!(fluent_probs.len(), 2);
    debug_assert_eq!(disfluent_probs.len(), Label::ALL.len());
    if argmax(fluent_probs) == 0 {
        return Label::Fluent;
    }
    let fluent_idx = Label::Fluent.index();
    let mut best: Option<usize> = None;
    for (i, v) in disfluent_probs.iter().enumerate() {
        if i == fluent_idx {
            continue;
        }
        if best.is_none_or(|b| *v > disfluent_probs[b]) {
            best = Some(i);
        }
    }
    Label::from_index(best.expect("at least one disfluent class")).expect("valid index")
}

/// One evaluation's serialized result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub fold: Option<usize>,
    pub config_hash: String,
    pub n: u64,
    pub total_accuracy: f64,
    pub macro_f1: f64,
    /// Class names in confusion-matrix row/column order.
    pub classes: Vec<String>,
    /// Only classes with non-zero support appear.
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of manifest records actually evaluated (unreadable audio is
    /// skipped and counted below).
    pub coverage: f64,
    pub skipped: u64,
}

impl RunReport {
    pub fn from_counts(
        counts: &EvalCounts,
        class_names: &[&str],
        fold: Option<usize>,
        config_hash: &str,
        skipped: u64,
    ) -> RunReport {
        assert_eq!(class_names.len(), counts.n_classes());
        let mut per_class = BTreeMap::new();
        for (k, acc) in per_class_accuracy(counts).into_iter().enumerate() {
            if let Some(a) = acc {
                per_class.insert(class_names[k].to_string(), a);
            }
        }
        let n = counts.n();
        let coverage = if n + skipped == 0 {
            1.0
        } else {
            n as f64 / (n + skipped) as f64
        };
        RunReport {
            fold,
            config_hash: config_hash.to_string(),
            n,
            total_accuracy: counts.total_accuracy(),
            macro_f1: macro_f1(counts),
            classes: class_names.iter().map(|s| s.to_string()).collect(),
            per_class_accuracy: per_class,
            confusion: counts.confusion().clone(),
            coverage,
            skipped,
        }
    }

    /// Unweighted mean of scalar metrics over fold reports; the confusion
    /// matrices are summed for reference. Per-class accuracies average over
    /// the folds where the class was defined.
    pub fn average(reports: &[RunReport]) -> Option<RunReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let c = reports[0].confusion.len();
        let mut confusion = vec![vec![0u64; c]; c];
        let mut per_class_sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for r in reports {
            for (a, b) in confusion.iter_mut().zip(&r.confusion) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            for (name, acc) in &r.per_class_accuracy {
                let e = per_class_sums.entry(name.clone()).or_insert((0.0, 0.0));
                e.0 += acc;
                e.1 += 1.0;
            }
        }
        Some(RunReport {
            fold: None,
            config_hash: reports[0].config_hash.clone(),
            n: reports.iter().map(|r| r.n).sum(),
            total_accuracy: reports.iter().map(|r| r.total_accuracy).sum::<f64>() / k,
            macro_f1: reports.iter().map(|r| r.macro_f1).sum::<f64>() / k,
            classes: reports[0].classes.clone(),
            per_class_accuracy: per_class_sums
                .into_iter()
                .map(|(name, (sum, cnt))| (name, sum / cnt))
                .collect(),
            confusion,
            coverage: reports.iter().map(|r| r.coverage).sum::<f64>() / k,
            skipped: reports.iter().map(|r| r.skipped).sum(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: bad report: {e}", path.display())))
    }
}
