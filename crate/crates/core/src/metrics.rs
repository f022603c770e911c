//! Confusion matrices, classification metrics and fold aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(labels: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::data(format!(
                "{} labels but {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (i, (&t, &p)) in labels.iter().zip(predicted).enumerate() {
            if t >= num_classes || p >= num_classes {
                return Err(Error::data(format!(
                    "sample {i}: class out of range (label {t}, predicted {p}, {num_classes} classes)"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    fn one_vs_rest(&self, c: usize) -> (usize, usize, usize) {
        let tp = self.counts[c][c];
        let fp = (0..self.num_classes())
            .map(|t| self.counts[t][c])
            .sum::<usize>()
            - tp;
        let fn_ = self.counts[c].iter().sum::<usize>() - tp;
        (tp, fp, fn_)
    }
}

/// Metric values; any ratio with a zero denominator is reported as 0 and
/// named in `undefined_flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall_sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub undefined_flags: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Binary problems score class 1 as positive. With three classes,
/// precision, recall and specificity are macro averages over one-vs-rest
/// splits and F1 is the harmonic mean of macro precision and macro recall.
pub fn metrics(cm: &Confusion) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("empty confusion matrix"));
    }
    let mut undefined = Vec::new();
    let k = cm.num_classes();
    let correct: usize = (0..k).map(|c| cm.counts[c][c]).sum();
    let accuracy = correct as f64 / total as f64;
    let per_class = |c: usize, tag: &str, undefined: &mut Vec<String>| {
        let (tp, fp, fn_) = cm.one_vs_rest(c);
        let tn = total - tp - fp - fn_;
        [
            ratio(tp, tp + fp, &format!("precision{tag}"), undefined),
            ratio(tp, tp + fn_, &format!("recall_sensitivity{tag}"), undefined),
            ratio(tn, tn + fp, &format!("specificity{tag}"), undefined),
        ]
    };
    let [precision, recall, specificity] = if k == 2 {
        per_class(1, "", &mut undefined)
    } else {
        let mut acc = [0.0; 3];
        for c in 0..k {
            let r = per_class(c, &format!("[{c}]"), &mut undefined);
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v / k as f64;
            }
        }
        acc
    };
    let f1 = if precision + recall == 0.0 {
        undefined.push("f1".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall_sensitivity: recall,
        specificity,
        f1,
        undefined_flags: undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single fold.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall_sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub f1: MeanStd,
}

pub fn aggregate_folds(per_fold: &[Metrics]) -> Result<Aggregate> {
    if per_fold.is_empty() {
        return Err(Error::data("no folds to aggregate"));
    }
    let col = |f: fn(&Metrics) -> f64| MeanStd::of(&per_fold.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        folds: per_fold.len(),
        accuracy: col(|m| m.accuracy),
        precision: col(|m| m.precision),
        recall_sensitivity: col(|m| m.recall_sensitivity),
        specificity: col(|m| m.specificity),
        f1: col(|m| m.f1),
    })
}

/// Plain-text table: one row per fold, then mean ± std.
pub fn format_table(per_fold: &[Metrics], agg: &Aggregate) -> String {
    let mut s = String::new();
    let head = ["ACC", "SEN", "SPE", "PRE", "F1"];
    write!(s, "{:<6}", "fold").unwrap();
    for h in head {
        write!(s, "{h:>16}").unwrap();
    }
    s.push('\n');
    for (i, m) in per_fold.iter().enumerate() {
        write!(s, "{i:<6}").unwrap();
        for v in [
            m.accuracy,
            m.recall_sensitivity,
            m.specificity,
            m.precision,
            m.f1,
        ] {
            write!(s, "{:>16.4}", v).unwrap();
        }
        s.push_str(if m.undefined_flags.is_empty() {
            "\n"
        } else {
            "  *\n"
        });
    }
    write!(s, "{:<6}", "mean").unwrap();
    for c in [
        agg.accuracy,
        agg.recall_sensitivity,
        agg.specificity,
        agg.precision,
        agg.f1,
    ] {
        write!(s, "{:>16}", format!("{:.4}±{:.4}", c.mean, c.std)).unwrap();
    }
    s.push('\n');
    if per_fold.iter().any(|m| !m.undefined_flags.is_empty()) {
        s.push_str("* some ratios had zero denominators and were reported as 0\n");
    }
    s
}
