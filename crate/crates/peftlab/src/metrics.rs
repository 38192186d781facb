//! Evaluation metrics: accuracy, F1, Matthews correlation, Pearson and
//! Spearman correlations.
//!
//! Binary metrics treat class 1 as positive. MCC follows
//! `(TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))` and reports 0
//! with a degeneracy flag when the denominator vanishes. Spearman assigns
//! average ranks to ties and then applies `1 - 6*Σd²/(n(n²-1))`.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[usize], targets: &[usize]) -> Self {
        let mut c = Confusion { true_pos: 0, false_pos: 0, true_neg: 0, false_neg: 0 };
        for (&p, &t) in preds.iter().zip(targets) {
            match (p == 1, t == 1) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, false) => c.true_neg += 1,
                (false, true) => c.false_neg += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// A metric value plus a flag marking degenerate inputs (single-class
/// confusion, zero-variance correlation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

impl Flagged {
    fn ok(value: f64) -> Self {
        Flagged { value, degenerate: false }
    }

    fn degenerate() -> Self {
        Flagged { value: 0.0, degenerate: true }
    }
}

pub fn accuracy(preds: &[usize], targets: &[usize]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    hits as f64 / preds.len() as f64
}

pub fn precision(c: &Confusion) -> f64 {
    let denom = c.true_pos + c.false_pos;
    if denom == 0 {
        0.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

pub fn recall(c: &Confusion) -> f64 {
    let denom = c.true_pos + c.false_neg;
    if denom == 0 {
        0.0
    } else {
        c.true_pos as f64 / denom as f64
    }
}

/// `F1 = 2 * precision * recall / (precision + recall)`, 0 when undefined.
pub fn f1(c: &Confusion) -> f64 {
    let p = precision(c);
    let r = recall(c);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_accuracy(c: &Confusion) -> f64 {
    if c.total() == 0 {
        0.0
    } else {
        (c.true_pos + c.true_neg) as f64 / c.total() as f64
    }
}

/// Matthews correlation coefficient.
pub fn mcc(c: &Confusion) -> Flagged {
    let tp = c.true_pos as f64;
    let tn = c.true_neg as f64;
    let fp = c.false_pos as f64;
    let fne = c.false_neg as f64;
    let denom = ((tp + fp) * (tp + fne) * (tn + fp) * (tn + fne)).sqrt();
    if denom == 0.0 {
        return Flagged::degenerate();
    }
    Flagged::ok((tp * tn - fp * fne) / denom)
}

/// Pearson correlation coefficient; 0 with a flag when either side has no
/// variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Flagged {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n == 0 {
        return Flagged::degenerate();
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Flagged::degenerate();
    }
    Flagged::ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based), ties receiving the mean of their rank span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("no NaN in rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation via `ρ = 1 - 6 Σ d_i² / (n(n²-1))` on average
/// ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Flagged {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return Flagged::degenerate();
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    let nf = n as f64;
    Flagged::ok(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)))
}

/// Task family, which decides the applicable metric subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    BinaryClassification,
    MultiClassification,
    Regression,
}

/// One evaluation snapshot.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
    pub mcc_degenerate: bool,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

impl MetricReport {
    pub fn empty(loss: f64) -> Self {
        MetricReport {
            loss,
            accuracy: None,
            f1: None,
            mcc: None,
            mcc_degenerate: false,
            pearson: None,
            spearman: None,
        }
    }

    /// The headline metric for sweeps: accuracy for classification,
    /// Pearson for regression.
    pub fn primary(&self) -> Option<f64> {
        self.accuracy.or(self.pearson)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "loss {:.6}", self.loss)?;
        if let Some(a) = self.accuracy {
            write!(f, " acc {a:.4}")?;
        }
        if let Some(v) = self.f1 {
            write!(f, " f1 {v:.4}")?;
        }
        if let Some(v) = self.mcc {
            write!(f, " mcc {v:.4}")?;
        }
        if let Some(v) = self.pearson {
            write!(f, " pearson {v:.4}")?;
        }
        if let Some(v) = self.spearman {
            write!(f, " spearman {v:.4}")?;
        }
        Ok(())
    }
}

/// Classification report from hard predictions.
pub fn classification_report(
    loss: f64,
    preds: &[usize],
    targets: &[usize],
    n_classes: usize,
) -> MetricReport {
    let mut report = MetricReport::empty(loss);
    report.accuracy = Some(accuracy(preds, targets));
    if n_classes == 2 {
        let c = Confusion::from_predictions(preds, targets);
        report.f1 = Some(f1(&c));
        let m = mcc(&c);
        report.mcc = Some(m.value);
        report.mcc_degenerate = m.degenerate;
    } else {
        report.f1 = Some(macro_f1(preds, targets, n_classes));
    }
    report
}

/// Regression report from real-valued scores.
pub fn regression_report(loss: f64, preds: &[f64], targets: &[f64]) -> MetricReport {
    let mut report = MetricReport::empty(loss);
    report.pearson = Some(pearson(preds, targets).value);
    report.spearman = Some(spearman(preds, targets).value);
    report
}

fn macro_f1(preds: &[usize], targets: &[usize], n_classes: usize) -> f64 {
    let mut sum = 0.0;
    for class in 0..n_classes {
        let bin =
            |v: usize| -> usize {
                if v == class {
                    1
                } else {
                    0
                }
            };
        let bp: Vec<usize> = preds.iter().map(|&v| bin(v)).collect();
        let bt: Vec<usize> = targets.iter().map(|&v| bin(v)).collect();
        sum += f1(&Confusion::from_predictions(&bp, &bt));
    }
    sum / n_classes as f64
}
