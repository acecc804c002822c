//! Scoring of predictions against gold annotations.
//!
//! Predictions are aligned to gold entities by embedding similarity rather
//! than span offsets, so differently worded mentions of the same concept
//! ("angiogram" vs "angiography") still count. Alignment is one-to-one and
//! greedy in descending similarity.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntityLabel, GoldEntity};
use crate::embedding::{cosine_similarity, embed_all, EmbeddingError, EmbeddingProvider, SimilarityScore};
use crate::ensemble::EnsemblePrediction;
use crate::gateway::CompletionRecord;
use crate::prompt::PromptStrategy;
use crate::response::ExtractedEntity;

pub use report::{write_match_csv, EvaluationReport, ReportRow, MATCHING_POLICY};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("gold set is empty")]
    ZeroGold,
    #[error("no matched predictions to classify")]
    EmptyMatchSet,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A prediction from either a single prompt run or the ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub text: String,
    pub label: EntityLabel,
}

impl From<&ExtractedEntity> for PredictedEntity {
    fn from(e: &ExtractedEntity) -> Self {
        Self { text: e.text.clone(), label: e.label }
    }
}

impl From<&EnsemblePrediction> for PredictedEntity {
    fn from(p: &EnsemblePrediction) -> Self {
        Self { text: p.text.clone(), label: p.label }
    }
}

/// `gold` and `similarity` are both present exactly when the prediction was
/// matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub predicted: PredictedEntity,
    pub gold: Option<GoldEntity>,
    pub similarity: Option<SimilarityScore>,
}

impl MatchRecord {
    pub fn is_matched(&self) -> bool {
        self.gold.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub predict: usize,
    #[serde(rename = "match")]
    pub matched: usize,
    pub unknown: usize,
    pub gold_total: usize,
    /// `matched / gold_total`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        Self { precision, recall, f1: f1(precision, recall) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_label: BTreeMap<EntityLabel, LabelMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub weighted: Prf,
    pub micro: Prf,
    /// Gold labels absent from the matched set; their metrics are 0.
    pub zero_support: Vec<EntityLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub latency_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    pub total_seconds: f64,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-to-one greedy matching over a similarity function. Candidate pairs
/// with similarity `>= tau` are accepted in descending similarity, ties
/// broken by prediction index then gold index. Returns, per prediction, the
/// matched gold index and similarity.
pub fn match_by_similarity<E>(
    predictions: usize,
    gold: usize,
    tau: f64,
    mut similarity: impl FnMut(usize, usize) -> Result<f64, E>,
) -> Result<Vec<Option<(usize, f64)>>, E> {
    let mut pairs = Vec::new();
    for p in 0..predictions {
        for g in 0..gold {
            let s = similarity(p, g)?;
            if s >= tau {
                pairs.push((s, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; predictions];
    let mut gold_used = vec![false; gold];
    for (s, p, g) in pairs {
        if out[p].is_none() && !gold_used[g] {
            out[p] = Some((g, s));
            gold_used[g] = true;
        }
    }
    Ok(out)
}

pub fn match_predictions(
    predictions: &[PredictedEntity],
    gold: &[GoldEntity],
    tau: f64,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<MatchRecord>, EvaluationError> {
    if gold.is_empty() {
        return Err(EvaluationError::ZeroGold);
    }
    let pred_texts: Vec<String> = predictions.iter().map(|p| p.text.clone()).collect();
    let gold_texts: Vec<String> = gold.iter().map(|g| g.text.clone()).collect();
    let pred_vecs = if predictions.is_empty() { Vec::new() } else { embed_all(&pred_texts, provider)? };
    let gold_vecs = embed_all(&gold_texts, provider)?;
    let assignment = match_by_similarity(predictions.len(), gold.len(), tau, |p, g| {
        cosine_similarity(&pred_vecs[p], &gold_vecs[g]).map(|s| s.value())
    })?;
    Ok(predictions
        .iter()
        .zip(assignment)
        .map(|(p, m)| MatchRecord {
            predicted: p.clone(),
            gold: m.map(|(g, _)| gold[g].clone()),
            similarity: m.map(|(_, s)| SimilarityScore::new(s)),
        })
        .collect())
}

pub fn extraction_metrics(records: &[MatchRecord], gold_total: usize) -> Result<ExtractionMetrics, EvaluationError> {
    if gold_total == 0 {
        return Err(EvaluationError::ZeroGold);
    }
    let matched = records.iter().filter(|r| r.is_matched()).count();
    Ok(ExtractionMetrics {
        predict: records.len(),
        matched,
        unknown: records.iter().filter(|r| r.predicted.label == EntityLabel::Unknown).count(),
        gold_total,
        accuracy: matched as f64 / gold_total as f64,
    })
}

/// Per-label and averaged precision/recall/F1 over matched pairs, treating
/// the gold label as truth. An `unknown` prediction is a false negative for
/// its gold label and never a true or false positive.
pub fn classification_metrics(records: &[MatchRecord]) -> Result<ClassificationMetrics, EvaluationError> {
    let pairs: Vec<(EntityLabel, EntityLabel)> =
        records.iter().filter_map(|r| r.gold.as_ref().map(|g| (g.label, r.predicted.label))).collect();
    if pairs.is_empty() {
        return Err(EvaluationError::EmptyMatchSet);
    }
    let mut per_label = BTreeMap::new();
    let mut zero_support = Vec::new();
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
    for label in EntityLabel::GOLD {
        let tp = pairs.iter().filter(|(g, p)| *g == label && *p == label).count();
        let fp = pairs.iter().filter(|(g, p)| *g != label && *p == label).count();
        let fneg = pairs.iter().filter(|(g, p)| *g == label && *p != label).count();
        let support = tp + fneg;
        if support == 0 {
            zero_support.push(label);
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, support);
        per_label.insert(
            label,
            LabelMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support,
                true_positives: tp,
                false_positives: fp,
                false_negatives: fneg,
            },
        );
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fneg;
    }
    let n = EntityLabel::GOLD.len() as f64;
    let macro_avg = Prf {
        precision: per_label.values().map(|m| m.precision).sum::<f64>() / n,
        recall: per_label.values().map(|m| m.recall).sum::<f64>() / n,
        f1: per_label.values().map(|m| m.f1).sum::<f64>() / n,
    };
    let total_support: usize = per_label.values().map(|m| m.support).sum();
    let weighted_mean =
        |f: fn(&LabelMetrics) -> f64| per_label.values().map(|m| f(m) * m.support as f64).sum::<f64>() / total_support as f64;
    let weighted = Prf {
        precision: weighted_mean(|m| m.precision),
        recall: weighted_mean(|m| m.recall),
        f1: weighted_mean(|m| m.f1),
    };
    let micro = Prf::from_pr(ratio(tp_sum, tp_sum + fp_sum), ratio(tp_sum, tp_sum + fn_sum));
    Ok(ClassificationMetrics { per_label, macro_avg, weighted, micro, zero_support })
}

/// Latency per strategy (summed when a strategy has several records), in
/// report order, plus the total.
pub fn timing_report(records: &BTreeMap<PromptStrategy, Vec<CompletionRecord>>) -> TimingReport {
    let rows: Vec<TimingRow> = PromptStrategy::ALL
        .iter()
        .filter_map(|s| records.get(s).filter(|r| !r.is_empty()).map(|r| (s, r)))
        .map(|(s, r)| TimingRow {
            strategy: s.display_name().to_string(),
            latency_seconds: r.iter().map(|c| c.latency_seconds).sum(),
        })
        .collect();
    let total_seconds = rows.iter().map(|r| r.latency_seconds).sum();
    TimingReport { rows, total_seconds }
}
