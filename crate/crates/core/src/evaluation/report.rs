use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use super::{ClassificationMetrics, ExtractionMetrics, MatchRecord, TimingReport};
use crate::corpus::EntityLabel;

pub const MATCHING_POLICY: &str = "one-to-one, greedy by descending cosine similarity";

/// One strategy (or the ensemble). Failures are kept per row so one bad
/// strategy does not sink the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: String,
    pub name: String,
    pub extraction: Option<ExtractionMetrics>,
    pub classification: Option<ClassificationMetrics>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub template_version: String,
    pub tau: f64,
    pub embedding_provider: String,
    pub matching_policy: String,
    pub gold_total: usize,
    pub rows: Vec<ReportRow>,
    pub timing: TimingReport,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text tables: extraction, classification, per-label detail and
    /// timing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {}  template {}  tau {}  embeddings {}", self.run_id, self.template_version, self.tau, self.embedding_provider);
        let _ = writeln!(out, "matching: {}; gold entities: {}", self.matching_policy, self.gold_total);

        let _ = writeln!(out, "\nEntity Extraction Performance");
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>9}", "Prompt", "Predict", "Match", "Unknown", "Accuracy");
        for row in &self.rows {
            match &row.extraction {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{:<12} {:>8} {:>8} {:>8} {:>9.4}",
                        row.name, m.predict, m.matched, m.unknown, m.accuracy
                    );
                }
                None => {
                    let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>9}", row.name, "-", "-", "-", "-");
                }
            }
        }

        let _ = writeln!(out, "\nEntity Classification Performance");
        let _ = writeln!(
            out,
            "{:<12} {:>28} {:>28} {:>28}",
            "", "macro P / R / F1", "weighted P / R / F1", "micro P / R / F1"
        );
        for row in &self.rows {
            let c = row.classification.as_ref();
            let group = |f: fn(&ClassificationMetrics) -> super::Prf| {
                let prf = c.map(f);
                format!(
                    "{} / {} / {}",
                    cell(prf.map(|p| p.precision)),
                    cell(prf.map(|p| p.recall)),
                    cell(prf.map(|p| p.f1))
                )
            };
            let _ = writeln!(
                out,
                "{:<12} {:>28} {:>28} {:>28}",
                row.name,
                group(|m| m.macro_avg),
                group(|m| m.weighted),
                group(|m| m.micro)
            );
        }

        let _ = writeln!(out, "\nPer-label detail");
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>9} {:>9} {:>9} {:>8}",
            "Prompt", "Label", "Precision", "Recall", "F1", "Support"
        );
        for row in &self.rows {
            let Some(c) = &row.classification else { continue };
            for label in EntityLabel::GOLD {
                let m = &c.per_label[&label];
                let flag = if c.zero_support.contains(&label) { "  (no support)" } else { "" };
                let _ = writeln!(
                    out,
                    "{:<12} {:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
                    row.name,
                    label.title(),
                    m.precision,
                    m.recall,
                    m.f1,
                    m.support
                );
            }
        }

        let _ = writeln!(out, "\nPrompt Execution Time");
        for t in &self.timing.rows {
            let _ = writeln!(out, "{:<12} {:>9.2} s", t.strategy, t.latency_seconds);
        }
        let _ = writeln!(out, "{:<12} {:>9.2} s", "Total", self.timing.total_seconds);

        let errors: Vec<String> =
            self.rows.iter().flat_map(|r| r.errors.iter().map(move |e| format!("{}: {e}", r.name))).collect();
        if !errors.is_empty() {
            let _ = writeln!(out, "\nErrors");
            for e in errors {
                let _ = writeln!(out, "{e}");
            }
        }
        out
    }
}

/// CSV of match records, one line per prediction, tagged with its row key.
pub fn write_match_csv<W: io::Write>(writer: W, rows: &[(String, Vec<MatchRecord>)]) -> Result<(), csv::Error> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "row",
        "predicted_text",
        "predicted_label",
        "gold_text",
        "gold_label",
        "gold_line",
        "gold_token_start",
        "gold_token_end",
        "similarity",
    ])?;
    for (key, records) in rows {
        for r in records {
            let gold = r.gold.as_ref();
            csv.write_record([
                key.clone(),
                r.predicted.text.clone(),
                r.predicted.label.to_string(),
                gold.map(|g| g.text.clone()).unwrap_or_default(),
                gold.map(|g| g.label.to_string()).unwrap_or_default(),
                gold.map(|g| g.line.to_string()).unwrap_or_default(),
                gold.map(|g| g.token_start.to_string()).unwrap_or_default(),
                gold.map(|g| g.token_end.to_string()).unwrap_or_default(),
                r.similarity.map(|s| s.value().to_string()).unwrap_or_default(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
