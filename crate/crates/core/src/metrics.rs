//! Confusion matrices and one-vs-rest classification metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// `(tp, fp, fn, tn)` for class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let fp = self.col_total(c) - tp;
        let fn_ = self.row_total(c) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::Domain(format!(
                "class index ({t}, {p}) out of range for {classes} classes"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy and per-class precision / sensitivity / specificity. Metrics with
/// a zero denominator are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub precision: Vec<Option<f64>>,
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
    pub class_names: Vec<String>,
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("cannot report metrics for zero samples".into()));
    }
    let k = cm.classes();
    let mut rep = MetricsReport {
        n: total,
        accuracy: cm.trace() as f64 / total as f64,
        precision: Vec::with_capacity(k),
        sensitivity: Vec::with_capacity(k),
        specificity: Vec::with_capacity(k),
        class_names: (0..k).map(|i| format!("class{i}")).collect(),
    };
    for c in 0..k {
        let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
        rep.precision.push(ratio(tp, tp + fp));
        rep.sensitivity.push(ratio(tp, tp + fn_));
        rep.specificity.push(ratio(tn, tn + fp));
    }
    Ok(rep)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl MetricsReport {
    pub fn with_class_names(mut self, names: &[String]) -> Self {
        if names.len() == self.precision.len() {
            self.class_names = names.to_vec();
        }
        self
    }

    pub fn classes(&self) -> usize {
        self.precision.len()
    }

    /// Metric-wise mean over reports; undefined entries are skipped.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let k = first.classes();
        let col = |f: fn(&MetricsReport) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
            (0..k).map(|c| mean_defined(reports.iter().map(|r| f(r)[c]))).collect()
        };
        Some(MetricsReport {
            n: reports.iter().map(|r| r.n).sum::<u64>() / reports.len() as u64,
            accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64,
            precision: col(|r| &r.precision),
            sensitivity: col(|r| &r.sensitivity),
            specificity: col(|r| &r.specificity),
            class_names: first.class_names.clone(),
        })
    }

    /// `key=value` lines, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n={}", self.n).unwrap();
        writeln!(s, "accuracy={}", pct(Some(self.accuracy))).unwrap();
        for c in 0..self.classes() {
            let name = &self.class_names[c];
            writeln!(s, "precision.{name}={}", pct(self.precision[c])).unwrap();
            writeln!(s, "sensitivity.{name}={}", pct(self.sensitivity[c])).unwrap();
            writeln!(s, "specificity.{name}={}", pct(self.specificity[c])).unwrap();
        }
        s
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["n".to_string(), "accuracy".to_string()];
        for name in &self.class_names {
            cols.push(format!("precision.{name}"));
            cols.push(format!("sensitivity.{name}"));
            cols.push(format!("specificity.{name}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.n.to_string(), pct(Some(self.accuracy))];
        for c in 0..self.classes() {
            cols.push(pct(self.precision[c]));
            cols.push(pct(self.sensitivity[c]));
            cols.push(pct(self.specificity[c]));
        }
        cols.join(",")
    }
}
