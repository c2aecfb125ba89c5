//! The two retrieval-instruction template grammars.
//!
//! Every retrieval query this system emits or accepts is an instance of
//! one of two fixed sentence templates:
//!
//! * symptom knowledge — `Retrieve symptom knowledge of <entity>.` or
//!   `Retrieve symptom knowledge of <entity> on <context>.`
//! * morphological profiles — `Retrieve morphological profiles for
//!   <entity> and <entity>, focusing on <attribute>.`
//!
//! Fixed text is case-sensitive and byte-exact, including the single
//! terminal period. Spans (`<entity>`, `<context>`, `<attribute>`) must be
//! nonempty, carry no surrounding whitespace, contain none of `. , ; :` or
//! newlines, and contain no descriptor word from a small blocklist
//! ("with", "showing", …). The span rules are what make the templates
//! *neutral*: a query that smuggles observed features in ("Apple Scab
//! with purple rings") stops being a template instance.
//!
//! Splitting is leftmost: the first ` on `, ` and `, `, focusing on `
//! occurrence delimits the spans.

use serde::{Deserialize, Serialize};

pub const G1_PREFIX: &str = "Retrieve symptom knowledge of ";
pub const G1_CONTEXT_SEP: &str = " on ";
pub const G2_PREFIX: &str = "Retrieve morphological profiles for ";
pub const G2_PAIR_SEP: &str = " and ";
pub const G2_FOCUS_SEP: &str = ", focusing on ";

/// Words that assert observed features and therefore disqualify a span.
pub const DESCRIPTOR_WORDS: [&str; 16] = [
    "with",
    "without",
    "which",
    "that",
    "showing",
    "shows",
    "exhibiting",
    "exhibits",
    "displaying",
    "displays",
    "featuring",
    "features",
    "characterized",
    "having",
    "has",
    "focusing",
];

const FORBIDDEN_SPAN_CHARS: [char; 5] = ['.', ',', ';', ':', '\n'];

/// Which template grammar a text instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SymptomKnowledge,
    MorphologicalProfiles,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SymptomKnowledge => "symptom_knowledge",
            TemplateId::MorphologicalProfiles => "morphological_profiles",
        }
    }
}

/// Outcome of validating a text against both grammars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateCheck {
    pub accepted: bool,
    pub template_id: Option<TemplateId>,
    /// Byte offset where matching first failed; from the grammar that
    /// advanced furthest. Rejections only.
    pub failed_at: Option<usize>,
    pub reason: Option<String>,
}

impl TemplateCheck {
    fn accept(template_id: TemplateId) -> Self {
        TemplateCheck {
            accepted: true,
            template_id: Some(template_id),
            failed_at: None,
            reason: None,
        }
    }
}

struct Failure {
    at: usize,
    reason: String,
}

/// Check one span; `base` is the span's byte offset in the full text.
fn check_span(span: &str, base: usize, what: &str) -> Option<Failure> {
    if span.is_empty() {
        return Some(Failure {
            at: base,
            reason: format!("{what} is empty"),
        });
    }
    if span.trim() != span {
        return Some(Failure {
            at: base,
            reason: format!("{what} has surrounding whitespace"),
        });
    }
    if let Some(pos) = span.find(FORBIDDEN_SPAN_CHARS) {
        return Some(Failure {
            at: base + pos,
            reason: format!(
                "{what} contains forbidden character {:?}",
                &span[pos..].chars().next().unwrap()
            ),
        });
    }
    let mut offset = 0;
    for word in span.split(' ') {
        let lower = word.to_lowercase();
        if DESCRIPTOR_WORDS.contains(&lower.as_str()) {
            return Some(Failure {
                at: base + offset,
                reason: format!("{what} contains descriptor word {word:?}"),
            });
        }
        offset += word.len() + 1;
    }
    None
}

/// How far `text` agrees with `expected` starting at `base`.
fn prefix_failure(text: &str, expected: &str, base: usize) -> Failure {
    let diverge = text
        .bytes()
        .zip(expected.bytes())
        .take_while(|(a, b)| a == b)
        .count();
    Failure {
        at: base + diverge,
        reason: format!("expected the fixed text {expected:?}"),
    }
}

/// Strip the single terminal period, or fail at the byte (in the full
/// text) where the period should have been; `base` is the body's offset.
fn strip_terminal_period(body: &str, base: usize) -> Result<&str, Failure> {
    match body.strip_suffix('.') {
        Some(stripped) => Ok(stripped),
        None => Err(Failure {
            at: base + body.len(),
            reason: "instruction must end with a single terminal period".into(),
        }),
    }
}

fn match_symptom(text: &str) -> Result<TemplateId, Failure> {
    let body = match text.strip_prefix(G1_PREFIX) {
        Some(rest) => rest,
        None => return Err(prefix_failure(text, G1_PREFIX, 0)),
    };
    let base = G1_PREFIX.len();
    let body = strip_terminal_period(body, base)?;
    match body.find(G1_CONTEXT_SEP) {
        Some(split) => {
            let entity = &body[..split];
            let context = &body[split + G1_CONTEXT_SEP.len()..];
            if let Some(failure) = check_span(entity, base, "entity") {
                return Err(failure);
            }
            let context_base = base + split + G1_CONTEXT_SEP.len();
            if let Some(failure) = check_span(context, context_base, "context") {
                return Err(failure);
            }
        }
        None => {
            if let Some(failure) = check_span(body, base, "entity") {
                return Err(failure);
            }
        }
    }
    Ok(TemplateId::SymptomKnowledge)
}

fn match_morphological(text: &str) -> Result<TemplateId, Failure> {
    let body = match text.strip_prefix(G2_PREFIX) {
        Some(rest) => rest,
        None => return Err(prefix_failure(text, G2_PREFIX, 0)),
    };
    let base = G2_PREFIX.len();
    let body = strip_terminal_period(body, base)?;
    let focus_split = body.find(G2_FOCUS_SEP).ok_or_else(|| Failure {
        at: base + body.len(),
        reason: format!("expected the fixed text {G2_FOCUS_SEP:?}"),
    })?;
    let pair_block = &body[..focus_split];
    let attribute = &body[focus_split + G2_FOCUS_SEP.len()..];
    let pair_split = pair_block.find(G2_PAIR_SEP).ok_or_else(|| Failure {
        at: base + pair_block.len(),
        reason: format!("expected the fixed text {G2_PAIR_SEP:?} between entities"),
    })?;
    let first = &pair_block[..pair_split];
    let second = &pair_block[pair_split + G2_PAIR_SEP.len()..];
    if let Some(failure) = check_span(first, base, "first entity") {
        return Err(failure);
    }
    let second_base = base + pair_split + G2_PAIR_SEP.len();
    if let Some(failure) = check_span(second, second_base, "second entity") {
        return Err(failure);
    }
    let attribute_base = base + focus_split + G2_FOCUS_SEP.len();
    if let Some(failure) = check_span(attribute, attribute_base, "attribute") {
        return Err(failure);
    }
    Ok(TemplateId::MorphologicalProfiles)
}

/// Validate a candidate retrieval instruction against both grammars.
/// Rejections report the failure from whichever grammar advanced furthest.
pub fn validate_instruction_template(text: &str) -> TemplateCheck {
    let symptom = match match_symptom(text) {
        Ok(id) => return TemplateCheck::accept(id),
        Err(failure) => failure,
    };
    let morphological = match match_morphological(text) {
        Ok(id) => return TemplateCheck::accept(id),
        Err(failure) => failure,
    };
    let best = if symptom.at >= morphological.at {
        symptom
    } else {
        morphological
    };
    TemplateCheck {
        accepted: false,
        template_id: None,
        failed_at: Some(best.at),
        reason: Some(best.reason),
    }
}

/// Render a symptom-knowledge template instance.
pub fn render_symptom_query(label: &str, context: Option<&str>) -> String {
    match context {
        Some(context) => format!("{G1_PREFIX}{label}{G1_CONTEXT_SEP}{context}."),
        None => format!("{G1_PREFIX}{label}."),
    }
}
