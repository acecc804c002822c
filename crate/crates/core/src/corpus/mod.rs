//! Clinical corpus ingestion: documents, gold concept annotations, inline
//! tagging and the per-strategy training samples.

mod annotation;
mod sampling;
mod tagging;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotation::{check_against_document, parse_concept_file, ConceptParse, MalformedAnnotation};
pub use sampling::{
    build_sample_set, EntityLists, LabelCounts, SampleSet, SamplingConfig, TaggedDocument,
    TaggedSentence,
};
pub use tagging::{tag_text, untag};

/// Clinical entity categories. `Unknown` is only ever produced by predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityLabel {
    Problem,
    Test,
    Treatment,
    Unknown,
}

impl EntityLabel {
    /// The three labels that gold annotations may carry.
    pub const GOLD: [EntityLabel; 3] = [EntityLabel::Problem, EntityLabel::Test, EntityLabel::Treatment];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Problem => "problem",
            EntityLabel::Test => "test",
            EntityLabel::Treatment => "treatment",
            EntityLabel::Unknown => "unknown",
        }
    }

    pub fn is_gold(self) -> bool {
        self != EntityLabel::Unknown
    }

    /// Case-insensitive lookup over the full vocabulary including `unknown`.
    pub fn parse_loose(token: &str) -> Option<EntityLabel> {
        match token.trim().to_lowercase().as_str() {
            "problem" => Some(EntityLabel::Problem),
            "test" => Some(EntityLabel::Test),
            "treatment" => Some(EntityLabel::Treatment),
            "unknown" => Some(EntityLabel::Unknown),
            _ => None,
        }
    }

    /// Capitalized name used in rendered prompts and report tables.
    pub fn title(self) -> &'static str {
        match self {
            EntityLabel::Problem => "Problem",
            EntityLabel::Test => "Test",
            EntityLabel::Treatment => "Treatment",
            EntityLabel::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityLabel::parse_loose(s).ok_or_else(|| format!("unknown entity label `{s}`"))
    }
}

/// One clinical record. Lines are addressed 1-based, matching the
/// annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalDocument {
    pub doc_id: String,
    pub lines: Vec<String>,
}

impl ClinicalDocument {
    pub fn new(doc_id: impl Into<String>, lines: Vec<String>) -> Self {
        Self { doc_id: doc_id.into(), lines }
    }

    pub fn from_text(doc_id: impl Into<String>, text: &str) -> Self {
        let lines = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::new(doc_id, lines)
    }

    pub fn line(&self, line_no: usize) -> Option<&str> {
        line_no.checked_sub(1).and_then(|i| self.lines.get(i)).map(String::as_str)
    }

    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    pub fn is_empty(&self) -> bool {
        self.lines.iter().all(|l| l.trim().is_empty())
    }
}

/// A gold concept span. Token offsets are 0-based whitespace-token indices
/// within `line`, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldEntity {
    pub text: String,
    pub label: EntityLabel,
    pub doc_id: String,
    pub line: usize,
    pub token_start: usize,
    pub token_end: usize,
}

impl GoldEntity {
    /// Serializes back into the concept annotation line grammar.
    pub fn to_concept_line(&self) -> String {
        format!(
            "c=\"{}\" {}:{} {}:{}||t=\"{}\"",
            self.text, self.line, self.token_start, self.line, self.token_end, self.label
        )
    }
}

/// A document paired with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub document: ClinicalDocument,
    pub entities: Vec<GoldEntity>,
}

impl AnnotatedDocument {
    pub fn label_counts(&self) -> LabelCounts {
        LabelCounts::from_labels(self.entities.iter().map(|e| e.label))
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("overlapping gold spans on line {line}: tokens {first:?} and {second:?}")]
    OverlappingSpans { line: usize, first: (usize, usize), second: (usize, usize) },
    #[error("span {start}..={end} out of range for a line with {tokens} tokens")]
    SpanOutOfRange { start: usize, end: usize, tokens: usize },
    #[error("gold annotation may not carry the unknown label")]
    UnknownGoldLabel,
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("test document `{0}` appears in the training pool")]
    TestLeakage(String),
    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{} malformed annotation(s), first: {}:{}", .0.len(), .0[0].0.display(), .0[0].1)]
    Malformed(Vec<(PathBuf, MalformedAnnotation)>),
}

/// Lower-cases, collapses internal whitespace and strips leading and
/// trailing punctuation. Used wherever entity strings are compared.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Whitespace tokens of a line as byte ranges.
pub(crate) fn token_spans(line: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, line.len()));
    }
    spans
}

/// Loads every document under `<dir>/txt/*.txt` with its annotations from
/// `<dir>/concept/<id>.con`, sorted by document id. A missing concept file
/// means the document has no annotations.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<AnnotatedDocument>, CorpusError> {
    let txt_dir = dir.join("txt");
    let entries = fs::read_dir(&txt_dir).map_err(|source| CorpusError::Io { path: txt_dir.clone(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    paths.sort();

    let mut docs = Vec::with_capacity(paths.len());
    let mut malformed = Vec::new();
    for path in paths {
        let doc_id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let document = ClinicalDocument::from_text(&doc_id, &text);

        let con_path = dir.join("concept").join(format!("{doc_id}.con"));
        let entities = if con_path.exists() {
            let raw = fs::read_to_string(&con_path)
                .map_err(|source| CorpusError::Io { path: con_path.clone(), source })?;
            let parsed = parse_concept_file(&raw, &doc_id);
            let mismatches = check_against_document(&document, &parsed.entities);
            malformed.extend(parsed.errors.into_iter().chain(mismatches).map(|m| (con_path.clone(), m)));
            parsed.entities
        } else {
            Vec::new()
        };
        docs.push(AnnotatedDocument { document, entities });
    }
    if !malformed.is_empty() {
        return Err(CorpusError::Malformed(malformed));
    }
    for pair in docs.windows(2) {
        if pair[0].document.doc_id == pair[1].document.doc_id {
            return Err(CorpusError::DuplicateDocument(pair[0].document.doc_id.clone()));
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_matches_rules() {
        assert_eq!(normalize("  UREA   N "), "urea n");
        assert_eq!(normalize("urea n-25."), "urea n-25");
        assert_eq!(normalize("(Aspirin)"), "aspirin");
        assert_eq!(normalize("..."), "");
    }

    #[test]
    fn token_spans_cover_whitespace_tokens() {
        let line = "  a bb\tccc ";
        let spans = token_spans(line);
        let toks: Vec<&str> = spans.iter().map(|&(s, e)| &line[s..e]).collect();
        assert_eq!(toks, line.split_whitespace().collect::<Vec<_>>());
    }

    #[test]
    fn document_lines_are_one_based() {
        let doc = ClinicalDocument::from_text("d", "first\r\nsecond");
        assert_eq!(doc.line(1), Some("first"));
        assert_eq!(doc.line(2), Some("second"));
        assert_eq!(doc.line(0), None);
        assert_eq!(doc.line(3), None);
    }

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!("TREATMENT".parse::<EntityLabel>().unwrap(), EntityLabel::Treatment);
        assert!("medication".parse::<EntityLabel>().is_err());
        assert!(!EntityLabel::Unknown.is_gold());
    }
}
