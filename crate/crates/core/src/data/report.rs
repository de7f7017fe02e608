use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{LabelVocabulary, Sample, NO_FINDING};
use crate::error::{Error, Result};

/// Per-label sample counts. A sample with several labels counts once for
/// each; samples with no label are tallied separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDistribution {
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    pub no_finding: usize,
    pub total: usize,
}

impl ClassDistribution {
    pub fn from_samples(samples: &[Sample], vocab: &LabelVocabulary) -> Result<Self> {
        let mut counts = vec![0; vocab.len()];
        let mut no_finding = 0;
        for s in samples {
            if s.targets.len() != vocab.len() {
                return Err(Error::shape(
                    "class_distribution",
                    format!("{} targets for {} labels", s.targets.len(), vocab.len()),
                ));
            }
            for (c, _) in s.targets.iter().enumerate().filter(|(_, &t)| t) {
                counts[c] += 1;
            }
            no_finding += usize::from(s.is_no_finding());
        }
        Ok(ClassDistribution { labels: vocab.names().to_vec(), counts, no_finding, total: samples.len() })
    }

    pub fn count(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| self.counts[i])
    }

    /// `label,count` rows in vocabulary order, then a `No Finding` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "count"]).expect("in-memory write");
        for (l, c) in self.labels.iter().zip(&self.counts) {
            w.write_record([l.as_str(), &c.to_string()]).expect("in-memory write");
        }
        w.write_record([NO_FINDING, &self.no_finding.to_string()]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Horizontal bar chart, one bar per label plus `No Finding`.
    pub fn to_svg(&self) -> String {
        let rows: Vec<(&str, usize)> = self
            .labels
            .iter()
            .map(String::as_str)
            .zip(self.counts.iter().copied())
            .chain(std::iter::once((NO_FINDING, self.no_finding)))
            .collect();
        let max = rows.iter().map(|r| r.1).max().unwrap_or(0).max(1);
        let (label_w, bar_w, row_h) = (150.0, 400.0, 22.0);
        let height = 40.0 + row_h * rows.len() as f64;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
            label_w + bar_w + 70.0
        );
        let _ = writeln!(svg, r#"<text x="10" y="20" font-size="14">Samples per label (n = {})</text>"#, self.total);
        for (i, (label, count)) in rows.iter().enumerate() {
            let y = 30.0 + row_h * i as f64;
            let w = bar_w * *count as f64 / max as f64;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text><rect x="{label_w}" y="{y}" width="{w:.2}" height="{}" fill="steelblue"/><text x="{}" y="{}">{count}</text>"#,
                label_w - 6.0,
                y + 15.0,
                xml_escape(label),
                row_h - 6.0,
                label_w + w + 4.0,
                y + 15.0
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `class_distribution.csv` and `distribution.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("class_distribution.csv");
        let svg_path = dir.join("distribution.svg");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&svg_path, self.to_svg()).map_err(|e| Error::io(&svg_path, e))?;
        Ok((csv_path, svg_path))
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
