//! Parsing of model responses into `(entity, label)` pairs.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, EntityLabel};
use crate::prompt::PromptStrategy;

/// The entity line format the prompt asks for and the parser accepts.
pub const ENTITY_LINE_GRAMMAR: &str = "<entity text> | <label>";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractedEntity {
    /// Normalized surface form; never empty.
    pub text: String,
    pub raw_text: String,
    pub label: EntityLabel,
    pub source: PromptStrategy,
    /// 0-based position among the entities of one response.
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub raw_line: String,
    pub reason: String,
}

/// A label token outside the vocabulary, mapped to `unknown`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelWarning {
    pub line_no: usize,
    pub label_token: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub entities: Vec<ExtractedEntity>,
    pub malformed: Vec<MalformedLine>,
    pub warnings: Vec<LabelWarning>,
    pub duplicate_count: usize,
    pub blank_lines: usize,
}

enum LineParse {
    Blank,
    Entity { raw_text: String, text: String, label: EntityLabel, unknown_token: Option<String> },
    Malformed(String),
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•]|\d{1,3}[.)])\s+").expect("marker regex"))
}

fn parse_line(line: &str) -> LineParse {
    if line.trim().is_empty() {
        return LineParse::Blank;
    }
    let Some((left, right)) = line.rsplit_once('|') else {
        return LineParse::Malformed("no `|` delimiter".into());
    };
    let raw_text = list_marker().replace(left, "").trim().to_string();
    let text = normalize(&raw_text);
    if text.is_empty() {
        return LineParse::Malformed("empty entity text".into());
    }
    let label_token = right.trim().trim_matches(|c: char| !c.is_alphanumeric());
    if label_token.is_empty() {
        return LineParse::Malformed("missing label".into());
    }
    match EntityLabel::parse_loose(label_token) {
        Some(label) => LineParse::Entity { raw_text, text, label, unknown_token: None },
        None => LineParse::Entity {
            raw_text,
            text,
            label: EntityLabel::Unknown,
            unknown_token: Some(label_token.to_string()),
        },
    }
}

/// Parses one entity per `<entity text> | <label>` line. Exact duplicate
/// pairs are collapsed and unrecognized labels become `unknown`.
pub fn parse_response(response_text: &str, source: PromptStrategy) -> ParseReport {
    let mut report = ParseReport::default();
    let mut seen: HashSet<(String, EntityLabel)> = HashSet::new();
    for (idx, line) in response_text.lines().enumerate() {
        let line_no = idx + 1;
        match parse_line(line) {
            LineParse::Blank => report.blank_lines += 1,
            LineParse::Malformed(reason) => {
                report.malformed.push(MalformedLine { line_no, raw_line: line.to_string(), reason })
            }
            LineParse::Entity { raw_text, text, label, unknown_token } => {
                if let Some(label_token) = unknown_token {
                    report.warnings.push(LabelWarning { line_no, label_token });
                }
                if !seen.insert((text.clone(), label)) {
                    report.duplicate_count += 1;
                    continue;
                }
                let ordinal = report.entities.len();
                report.entities.push(ExtractedEntity { text, raw_text, label, source, ordinal });
            }
        }
    }
    report
}

fn is_entity_line(line: &str) -> bool {
    matches!(parse_line(line), LineParse::Entity { .. })
}

/// Drops `<think>` reasoning blocks, code fence markers, and any prose before
/// the first or after the last entity line.
pub fn strip_preamble(response_text: &str) -> String {
    static THINK: OnceLock<Regex> = OnceLock::new();
    let think = THINK.get_or_init(|| Regex::new(r"(?s)<think>.*?</think>").expect("think regex"));
    let without_think = think.replace_all(response_text, "");

    let lines: Vec<&str> =
        without_think.lines().filter(|l| !l.trim_start().starts_with("```")).collect();
    let first = lines.iter().position(|l| is_entity_line(l));
    let last = lines.iter().rposition(|l| is_entity_line(l));
    match (first, last) {
        (Some(first), Some(last)) => lines[first..=last].join("\n"),
        _ => String::new(),
    }
}
