use std::sync::OnceLock;

use regex::Regex;

use super::{token_spans, CorpusError, GoldEntity};

/// Wraps each gold span of `line` as `<label>text</label>`. Text outside
/// the spans is copied byte for byte.
pub fn tag_text(line: &str, entities: &[GoldEntity]) -> Result<String, CorpusError> {
    let spans = token_spans(line);
    let mut ordered: Vec<&GoldEntity> = entities.iter().collect();
    ordered.sort_by_key(|e| (e.token_start, e.token_end));

    for e in &ordered {
        if !e.label.is_gold() {
            return Err(CorpusError::UnknownGoldLabel);
        }
        if e.token_start > e.token_end || e.token_end >= spans.len() {
            return Err(CorpusError::SpanOutOfRange { start: e.token_start, end: e.token_end, tokens: spans.len() });
        }
    }
    for pair in ordered.windows(2) {
        if pair[1].token_start <= pair[0].token_end {
            return Err(CorpusError::OverlappingSpans {
                line: pair[0].line,
                first: (pair[0].token_start, pair[0].token_end),
                second: (pair[1].token_start, pair[1].token_end),
            });
        }
    }

    let mut out = String::with_capacity(line.len() + ordered.len() * 24);
    let mut cursor = 0;
    for e in ordered {
        let (start, end) = (spans[e.token_start].0, spans[e.token_end].1);
        let tag = e.label.as_str();
        out.push_str(&line[cursor..start]);
        out.push('<');
        out.push_str(tag);
        out.push('>');
        out.push_str(&line[start..end]);
        out.push_str("</");
        out.push_str(tag);
        out.push('>');
        cursor = end;
    }
    out.push_str(&line[cursor..]);
    Ok(out)
}

/// Removes the entity tags inserted by [`tag_text`].
pub fn untag(tagged: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"</?(?:problem|test|treatment)>").expect("tag regex"));
    re.replace_all(tagged, "").into_owned()
}
