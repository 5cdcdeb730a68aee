//! Table-shaped reports: one row per model variant, one column per
//! metric@k.

use std::fmt::Write as _;

use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, metrics: MetricsReport) {
        self.rows.push(ReportRow {
            name: name.into(),
            metrics,
        });
    }

    pub fn row(&self, name: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.metrics)
    }

    fn k_values(&self) -> Vec<usize> {
        self.rows.first().map(|r| r.metrics.k_values.clone()).unwrap_or_default()
    }

    /// `model,cmc@k…,recall@k…,precision@k…,map@k…` with 6 decimals.
    pub fn to_csv(&self) -> String {
        let ks = self.k_values();
        let mut out = String::from("model");
        for metric in ["cmc", "recall", "precision", "map"] {
            for k in &ks {
                let _ = write!(out, ",{metric}@{k}");
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.name));
            let m = &row.metrics;
            for table in [&m.cmc, &m.recall, &m.precision, &m.map] {
                for k in &ks {
                    let _ = write!(out, ",{:.6}", table.get(k).copied().unwrap_or(f64::NAN));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text: a CMC block and an mAP block, values in percent.
    pub fn to_text(&self) -> String {
        let ks = self.k_values();
        let name_w = self.rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        for (title, label, pick) in [("CMC", "CMC@", 0usize), ("mAP", "mAP@", 1usize)] {
            let _ = writeln!(out, "{title}");
            let _ = write!(out, "{:<name_w$}", "Model");
            for k in &ks {
                let _ = write!(out, "  {:>8}", format!("{label}{k}"));
            }
            out.push('\n');
            for row in &self.rows {
                let _ = write!(out, "{:<name_w$}", row.name);
                let table = if pick == 0 { &row.metrics.cmc } else { &row.metrics.map };
                for k in &ks {
                    let _ = write!(out, "  {:>8.2}", 100.0 * table.get(k).copied().unwrap_or(f64::NAN));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
