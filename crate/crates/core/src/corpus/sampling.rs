use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, tag_text, AnnotatedDocument, CorpusError, EntityLabel, GoldEntity};
use crate::prompt::PromptStrategy;

/// Per-label mention counts over the three gold labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub problem: usize,
    pub test: usize,
    pub treatment: usize,
}

impl LabelCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = EntityLabel>) -> Self {
        let mut counts = Self::default();
        for label in labels {
            counts.add(label, 1);
        }
        counts
    }

    pub fn get(&self, label: EntityLabel) -> usize {
        match label {
            EntityLabel::Problem => self.problem,
            EntityLabel::Test => self.test,
            EntityLabel::Treatment => self.treatment,
            EntityLabel::Unknown => 0,
        }
    }

    fn add(&mut self, label: EntityLabel, n: usize) {
        match label {
            EntityLabel::Problem => self.problem += n,
            EntityLabel::Test => self.test += n,
            EntityLabel::Treatment => self.treatment += n,
            EntityLabel::Unknown => {}
        }
    }

    pub fn total(&self) -> usize {
        self.problem + self.test + self.treatment
    }
}

impl std::ops::Add for LabelCounts {
    type Output = LabelCounts;

    fn add(self, rhs: LabelCounts) -> LabelCounts {
        LabelCounts {
            problem: self.problem + rhs.problem,
            test: self.test + rhs.test,
            treatment: self.treatment + rhs.treatment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedDocument {
    pub doc_id: String,
    pub text: String,
    pub counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub doc_id: String,
    pub line: usize,
    pub text: String,
    pub counts: LabelCounts,
}

/// Deduplicated entity strings per gold label, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLists {
    pub problem: Vec<String>,
    pub test: Vec<String>,
    pub treatment: Vec<String>,
}

impl EntityLists {
    pub fn get(&self, label: EntityLabel) -> &[String] {
        match label {
            EntityLabel::Problem => &self.problem,
            EntityLabel::Test => &self.test,
            EntityLabel::Treatment => &self.treatment,
            EntityLabel::Unknown => &[],
        }
    }

    pub fn get_mut(&mut self, label: EntityLabel) -> Option<&mut Vec<String>> {
        match label {
            EntityLabel::Problem => Some(&mut self.problem),
            EntityLabel::Test => Some(&mut self.test),
            EntityLabel::Treatment => Some(&mut self.treatment),
            EntityLabel::Unknown => None,
        }
    }

    pub fn counts(&self) -> LabelCounts {
        LabelCounts { problem: self.problem.len(), test: self.test.len(), treatment: self.treatment.len() }
    }

    pub fn is_empty(&self) -> bool {
        self.counts().total() == 0
    }
}

/// Training material for one prompting strategy. Only the collection that
/// belongs to `strategy` is populated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub strategy: PromptStrategy,
    pub documents: Vec<TaggedDocument>,
    pub sentences: Vec<TaggedSentence>,
    pub entities: EntityLists,
}

impl SampleSet {
    pub fn empty(strategy: PromptStrategy) -> Self {
        Self { strategy, documents: Vec::new(), sentences: Vec::new(), entities: EntityLists::default() }
    }

    /// Entity mentions carried by the sample, per label.
    pub fn label_counts(&self) -> LabelCounts {
        let docs = self.documents.iter().fold(LabelCounts::default(), |acc, d| acc + d.counts);
        let sents = self.sentences.iter().fold(LabelCounts::default(), |acc, s| acc + s.counts);
        docs + sents + self.entities.counts()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty() && self.sentences.is_empty() && self.entities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub test_doc_id: String,
    pub seed: u64,
    /// Few-shot document; when absent one is drawn with `seed`.
    pub document_id: Option<String>,
    pub sentence_count: usize,
    pub sentence_documents: usize,
    /// Documents for sentence sampling; when absent they are drawn with `seed`.
    pub sentence_doc_ids: Option<Vec<String>>,
    /// Documents for the entity lists; when absent every pool document is used.
    pub entity_doc_ids: Option<Vec<String>>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            test_doc_id: String::new(),
            seed: 0,
            document_id: None,
            sentence_count: 100,
            sentence_documents: 5,
            sentence_doc_ids: None,
            entity_doc_ids: None,
        }
    }
}

/// Draws the training sample for `strategy` from `corpus`, which must not
/// contain the test document.
pub fn build_sample_set(
    strategy: PromptStrategy,
    corpus: &[AnnotatedDocument],
    limits: &SamplingConfig,
) -> Result<SampleSet, CorpusError> {
    if strategy == PromptStrategy::ZeroShot {
        return Ok(SampleSet::empty(strategy));
    }
    if corpus.is_empty() {
        return Err(CorpusError::InsufficientCorpus("training pool is empty".into()));
    }
    if corpus.iter().any(|d| d.document.doc_id == limits.test_doc_id) {
        return Err(CorpusError::TestLeakage(limits.test_doc_id.clone()));
    }

    let mut pool: Vec<&AnnotatedDocument> = corpus.iter().collect();
    pool.sort_by(|a, b| a.document.doc_id.cmp(&b.document.doc_id));

    let mut set = SampleSet::empty(strategy);
    match strategy {
        PromptStrategy::ZeroShot => unreachable!(),
        PromptStrategy::FewShotDocument => {
            let doc = match &limits.document_id {
                Some(id) => select(&pool, std::slice::from_ref(id), &limits.test_doc_id)?.remove(0),
                None => {
                    let mut candidates: Vec<_> = pool.iter().copied().filter(|d| !d.entities.is_empty()).collect();
                    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(limits.seed));
                    *candidates
                        .first()
                        .ok_or_else(|| CorpusError::InsufficientCorpus("no annotated document".into()))?
                }
            };
            set.documents.push(tag_document(doc)?);
        }
        PromptStrategy::FewShotSentences => {
            let docs = match &limits.sentence_doc_ids {
                Some(ids) => select(&pool, ids, &limits.test_doc_id)?,
                None => {
                    let mut candidates: Vec<_> = pool.iter().copied().filter(|d| !d.entities.is_empty()).collect();
                    if candidates.len() < limits.sentence_documents {
                        return Err(CorpusError::InsufficientCorpus(format!(
                            "{} annotated documents, {} required",
                            candidates.len(),
                            limits.sentence_documents
                        )));
                    }
                    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(limits.seed.wrapping_add(1)));
                    candidates.truncate(limits.sentence_documents);
                    candidates.sort_by(|a, b| a.document.doc_id.cmp(&b.document.doc_id));
                    candidates
                }
            };
            let mut candidates = Vec::new();
            for doc in &docs {
                for (line, entities) in entities_by_line(&doc.entities) {
                    candidates.push((*doc, line, entities));
                }
            }
            if candidates.len() < limits.sentence_count {
                return Err(CorpusError::InsufficientCorpus(format!(
                    "{} annotated sentences available, {} required",
                    candidates.len(),
                    limits.sentence_count
                )));
            }
            let mut picks: Vec<usize> = (0..candidates.len()).collect();
            picks.shuffle(&mut ChaCha8Rng::seed_from_u64(limits.seed.wrapping_add(2)));
            picks.truncate(limits.sentence_count);
            picks.sort_unstable();
            for i in picks {
                let (doc, line, ref entities) = candidates[i];
                let raw = doc.document.line(line).ok_or_else(|| {
                    CorpusError::InsufficientCorpus(format!("line {line} missing from `{}`", doc.document.doc_id))
                })?;
                let owned: Vec<GoldEntity> = entities.iter().map(|e| (*e).clone()).collect();
                set.sentences.push(TaggedSentence {
                    doc_id: doc.document.doc_id.clone(),
                    line,
                    text: tag_text(raw, &owned)?,
                    counts: LabelCounts::from_labels(owned.iter().map(|e| e.label)),
                });
            }
        }
        PromptStrategy::FewShotEntities => {
            let docs = match &limits.entity_doc_ids {
                Some(ids) => select(&pool, ids, &limits.test_doc_id)?,
                None => pool,
            };
            let mut seen: HashSet<(EntityLabel, String)> = HashSet::new();
            for doc in docs {
                for e in &doc.entities {
                    let text = normalize(&e.text);
                    if text.is_empty() || !seen.insert((e.label, text.clone())) {
                        continue;
                    }
                    if let Some(list) = set.entities.get_mut(e.label) {
                        list.push(text);
                    }
                }
            }
            if set.entities.is_empty() {
                return Err(CorpusError::InsufficientCorpus("no entities in the configured documents".into()));
            }
        }
    }
    Ok(set)
}

fn select<'a>(
    pool: &[&'a AnnotatedDocument],
    ids: &[String],
    test_doc_id: &str,
) -> Result<Vec<&'a AnnotatedDocument>, CorpusError> {
    ids.iter()
        .map(|id| {
            if id == test_doc_id {
                return Err(CorpusError::TestLeakage(id.clone()));
            }
            pool.iter()
                .copied()
                .find(|d| &d.document.doc_id == id)
                .ok_or_else(|| CorpusError::InsufficientCorpus(format!("document `{id}` not in the training pool")))
        })
        .collect()
}

fn entities_by_line(entities: &[GoldEntity]) -> BTreeMap<usize, Vec<&GoldEntity>> {
    let mut by_line: BTreeMap<usize, Vec<&GoldEntity>> = BTreeMap::new();
    for e in entities {
        by_line.entry(e.line).or_default().push(e);
    }
    by_line
}

fn tag_document(doc: &AnnotatedDocument) -> Result<TaggedDocument, CorpusError> {
    let by_line = entities_by_line(&doc.entities);
    let mut lines = Vec::with_capacity(doc.document.lines.len());
    for (i, line) in doc.document.lines.iter().enumerate() {
        match by_line.get(&(i + 1)) {
            Some(entities) => {
                let owned: Vec<GoldEntity> = entities.iter().map(|e| (*e).clone()).collect();
                lines.push(tag_text(line, &owned)?);
            }
            None => lines.push(line.clone()),
        }
    }
    Ok(TaggedDocument {
        doc_id: doc.document.doc_id.clone(),
        text: lines.join("\n"),
        counts: doc.label_counts(),
    })
}
