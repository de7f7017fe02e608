//! Single-label accuracy, confusion matrix, precision/recall and the
//! micro-averaged precision-recall curve.
//!
//! Multi-hot targets are reduced to one "true" class, the lowest-index
//! positive label (the argmax of the 0/1 vector with ties to the lowest
//! index). Samples without any positive label have no true class and are
//! left out of accuracy and the confusion matrix.

mod report;

use std::fmt::Write as _;

pub use report::{evaluate, evaluate_scores, Evaluation, LabelMetrics, MetricsReport, DECISION_THRESHOLD};

use crate::data::xml_escape;
use crate::error::{Error, Result};

/// Lowest-index positive label, or `None` for a sample with no positives.
pub fn true_class(targets: &[bool]) -> Option<usize> {
    targets.iter().position(|&t| t)
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("accuracy", format!("{} predictions, {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// `counts[i][j]`: samples of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(predicted: &[usize], truth: &[usize], k: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("confusion", format!("{} predictions, {} labels", predicted.len(), truth.len())));
        }
        let mut counts = vec![vec![0; k]; k];
        for (i, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
            if p >= k || t >= k {
                return Err(Error::invalid("confusion", format!("sample {i}: label ({t}, {p}) outside 0..{k}")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyInput("accuracy")),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// Rows are true classes, columns predictions; both headed by `labels`.
    pub fn to_csv(&self, labels: &[String]) -> Result<String> {
        if labels.len() != self.counts.len() {
            return Err(Error::shape("confusion_csv", format!("{} labels for {} classes", labels.len(), self.counts.len())));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("true\\predicted").chain(labels.iter().map(String::as_str));
        w.write_record(header).expect("in-memory write");
        for (label, row) in labels.iter().zip(&self.counts) {
            let cells = std::iter::once(label.clone()).chain(row.iter().map(u64::to_string));
            w.write_record(cells).expect("in-memory write");
        }
        Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 labels"))
    }
}

/// `(tp / (tp + fp), tp / (tp + fn))`, with precision 1 when nothing was
/// predicted positive.
pub fn precision_recall(tp: u64, fp: u64, fn_: u64) -> Result<(f64, f64)> {
    if tp + fn_ == 0 {
        return Err(Error::UndefinedRecall);
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    Ok((precision, tp as f64 / (tp + fn_) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points in descending threshold order, one per distinct score; a pair is
/// predicted positive when its score is at least the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Micro-averaged curve over all `(score, target)` pairs.
pub fn pr_curve(scores: &[f64], targets: &[bool]) -> Result<PrCurve> {
    if scores.len() != targets.len() {
        return Err(Error::shape("pr_curve", format!("{} scores, {} targets", scores.len(), targets.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("pr_curve"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("pr_curve: score {i} is {}", scores[i])));
    }
    let positives = targets.iter().filter(|&&t| t).count() as u64;
    if positives == 0 {
        return Err(Error::UndefinedRecall);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if targets[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (precision, recall) = precision_recall(tp, fp, positives - tp)?;
        points.push(PrPoint { threshold, precision, recall });
    }
    Ok(PrCurve { points })
}

impl PrCurve {
    /// `threshold,precision,recall` rows with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall).unwrap();
        }
        out
    }

    /// Precision against recall as a polyline on unit axes.
    pub fn to_svg(&self, title: &str) -> String {
        let (x0, y0, side) = (60.0, 40.0, 360.0);
        let px = |r: f64| x0 + side * r;
        let py = |p: f64| y0 + side * (1.0 - p);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
            x0 + side + 30.0,
            y0 + side + 50.0
        );
        let _ = writeln!(svg, r#"<text x="{x0}" y="24" font-size="14">{}</text>"#, xml_escape(title));
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{y0}" width="{side}" height="{side}" fill="none" stroke="black"/>"#
        );
        for t in 0..=4 {
            let v = t as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v}</text>"#,
                px(v),
                y0 + side + 16.0,
                x0 - 6.0,
                py(v) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">recall</text><text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">precision</text>"#,
            px(0.5),
            y0 + side + 36.0,
            py(0.5),
            py(0.5)
        );
        let coords: Vec<String> =
            self.points.iter().map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, coords.join(" "));
        // markers only while they stay readable
        for c in coords.iter().filter(|_| coords.len() <= 200) {
            let (x, y) = c.split_once(',').unwrap();
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2" fill="steelblue"/>"#);
        }
        svg.push_str("</svg>\n");
        svg
    }
}
