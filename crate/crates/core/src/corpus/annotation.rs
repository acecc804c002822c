use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{normalize, token_spans, ClinicalDocument, EntityLabel, GoldEntity};

/// A rejected annotation line; `line_no` is 1-based within the concept file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedAnnotation {
    pub line_no: usize,
    pub reason: String,
}

impl fmt::Display for MalformedAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.reason)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptParse {
    pub entities: Vec<GoldEntity>,
    pub errors: Vec<MalformedAnnotation>,
}

fn concept_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^c="(.*)" (0|[1-9][0-9]*):(0|[1-9][0-9]*) (0|[1-9][0-9]*):(0|[1-9][0-9]*)\|\|t="([^"]*)"$"#)
            .expect("concept regex")
    })
}

/// Parses i2b2-style concept lines (`c="text" L:T L:T||t="label"`).
/// Blank lines are skipped; every other line yields either an entity or an
/// error, so nothing is dropped silently.
pub fn parse_concept_file(raw: &str, doc_id: &str) -> ConceptParse {
    let mut out = ConceptParse::default();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_concept_line(line, doc_id) {
            Ok(entity) => out.entities.push(entity),
            Err(reason) => out.errors.push(MalformedAnnotation { line_no: idx + 1, reason }),
        }
    }
    out
}

fn parse_concept_line(line: &str, doc_id: &str) -> Result<GoldEntity, String> {
    let caps = concept_re()
        .captures(line)
        .ok_or_else(|| "does not match `c=\"<text>\" <line>:<tok> <line>:<tok>||t=\"<label>\"`".to_string())?;
    let num = |i: usize| caps[i].parse::<usize>().map_err(|e| format!("bad offset `{}`: {e}", &caps[i]));
    let text = caps[1].to_string();
    let (start_line, token_start, end_line, token_end) = (num(2)?, num(3)?, num(4)?, num(5)?);
    let label = match &caps[6] {
        "problem" => EntityLabel::Problem,
        "test" => EntityLabel::Test,
        "treatment" => EntityLabel::Treatment,
        other => return Err(format!("unsupported label `{other}`")),
    };
    if text.trim().is_empty() {
        return Err("empty concept text".into());
    }
    if start_line == 0 {
        return Err("line numbers are 1-based".into());
    }
    if start_line != end_line {
        return Err(format!("span crosses lines {start_line}..{end_line}"));
    }
    if token_start > token_end {
        return Err(format!("token start {token_start} after end {token_end}"));
    }
    Ok(GoldEntity { text, label, doc_id: doc_id.to_string(), line: start_line, token_start, token_end })
}

/// Checks each entity against its document: the line must exist and the
/// normalized token slice must equal the normalized concept text.
pub fn check_against_document(doc: &ClinicalDocument, entities: &[GoldEntity]) -> Vec<MalformedAnnotation> {
    let mut errors = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        let Some(line) = doc.line(e.line) else {
            errors.push(MalformedAnnotation {
                line_no: i + 1,
                reason: format!("line {} not in document `{}`", e.line, doc.doc_id),
            });
            continue;
        };
        let spans = token_spans(line);
        if e.token_end >= spans.len() {
            errors.push(MalformedAnnotation {
                line_no: i + 1,
                reason: format!("token {} beyond the {} tokens of line {}", e.token_end, spans.len(), e.line),
            });
            continue;
        }
        let slice = line[spans[e.token_start].0..spans[e.token_end].1].to_string();
        if normalize(&slice) != normalize(&e.text) {
            errors.push(MalformedAnnotation {
                line_no: i + 1,
                reason: format!("text `{}` does not match document tokens `{slice}`", e.text),
            });
        }
    }
    errors
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_hypertension_line() {
        let parsed = parse_concept_file(r#"c="hypertension" 12:4 12:4||t="problem""#, "doc1");
        assert!(parsed.errors.is_empty());
        assert_eq!(
            parsed.entities,
            vec![GoldEntity {
                text: "hypertension".into(),
                label: EntityLabel::Problem,
                doc_id: "doc1".into(),
                line: 12,
                token_start: 4,
                token_end: 4,
            }]
        );
    }

    #[test]
    fn empty_stream_is_empty() {
        assert_eq!(parse_concept_file("", "d"), ConceptParse::default());
    }

    #[test]
    fn missing_end_offset_is_rejected() {
        let parsed = parse_concept_file(r#"c="aspirin" 3:1||t="treatment""#, "d");
        assert!(parsed.entities.is_empty());
        assert_eq!(parsed.errors.len(), 1);
        assert_eq!(parsed.errors[0].line_no, 1);
    }

    #[test]
    fn errors_are_collected_per_line() {
        let raw = "c=\"a\" 1:0 1:0||t=\"test\"\n\nbogus\nc=\"b\" 2:3 2:1||t=\"test\"\nc=\"c\" 2:0 3:1||t=\"test\"\nc=\"d\" 0:0 0:0||t=\"test\"\nc=\"e\" 1:0 1:0||t=\"drug\"\n";
        let parsed = parse_concept_file(raw, "d");
        assert_eq!(parsed.entities.len(), 1);
        let lines: Vec<usize> = parsed.errors.iter().map(|e| e.line_no).collect();
        assert_eq!(lines, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn embedded_quotes_survive() {
        let line = r#"c="the "big" one" 1:0 1:2||t="problem""#;
        let parsed = parse_concept_file(line, "d");
        assert_eq!(parsed.entities[0].text, r#"the "big" one"#);
        assert_eq!(parsed.entities[0].to_concept_line(), line);
    }

    #[test]
    fn document_check_flags_mismatches() {
        let doc = ClinicalDocument::from_text("d", "patient has hypertension\nno labs");
        let ok = parse_concept_file("c=\"hypertension\" 1:2 1:2||t=\"problem\"", "d").entities;
        assert!(check_against_document(&doc, &ok).is_empty());
        let bad = parse_concept_file(
            "c=\"diabetes\" 1:2 1:2||t=\"problem\"\nc=\"x\" 2:5 2:5||t=\"test\"\nc=\"x\" 9:0 9:0||t=\"test\"",
            "d",
        )
        .entities;
        assert_eq!(check_against_document(&doc, &bad).len(), 3);
    }

    proptest! {
        #[test]
        fn serialize_round_trips(
            text in "[a-z0-9][a-z0-9 \"().,-]{0,20}",
            line in 1usize..500,
            start in 0usize..40,
            len in 0usize..5,
            label in prop::sample::select(vec!["problem", "test", "treatment"]),
        ) {
            let raw = format!("c=\"{text}\" {line}:{start} {line}:{}||t=\"{label}\"", start + len);
            let parsed = parse_concept_file(&raw, "d");
            prop_assert!(parsed.errors.is_empty());
            prop_assert_eq!(parsed.entities[0].to_concept_line(), raw);
        }
    }
}
