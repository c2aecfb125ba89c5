//! The look stage and candidate resolution.
//!
//! Turns an (image, question) request into an objective structured
//! description via the frozen look backend, and resolves the candidate
//! set: explicit options win, then options parsed out of the question
//! text, then backend nomination as the last resort. The look prompt is
//! kept free of candidate labels so perception cannot drift toward a
//! hypothesized answer.

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::prompts::PromptPack;
use crate::{Error, Result};

/// One inference request as the user posed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    /// Opaque image reference (path or URL); only the look backend sees it.
    pub image_ref: String,
    pub question: String,
    /// Caller-supplied answer options; override anything in the question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_options: Option<Vec<String>>,
    pub request_id: String,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Config("request question is empty".into()));
        }
        if self.request_id.trim().is_empty() {
            return Err(Error::Config("request_id is empty".into()));
        }
        Ok(())
    }
}

/// The objective description produced by the look backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredDescription {
    /// Full backend output, always preserved.
    pub raw_text: String,
    pub subject: String,
    pub global_observations: String,
    pub local_observations: String,
    /// True when the SUBJECT/GLOBAL/LOCAL section headers parsed; false
    /// degrades gracefully to `raw_text` with empty sections.
    pub section_parse_ok: bool,
}

impl StructuredDescription {
    /// Parse a backend response against the section-header grammar.
    pub fn from_raw(raw_text: &str) -> Result<Self> {
        if raw_text.trim().is_empty() {
            return Err(Error::MalformedResponse(
                "look backend returned an empty description".into(),
            ));
        }
        let parsed = parse_sections(raw_text);
        Ok(match parsed {
            Some((subject, global, local)) => StructuredDescription {
                raw_text: raw_text.to_string(),
                subject,
                global_observations: global,
                local_observations: local,
                section_parse_ok: true,
            },
            None => StructuredDescription {
                raw_text: raw_text.to_string(),
                subject: String::new(),
                global_observations: String::new(),
                local_observations: String::new(),
                section_parse_ok: false,
            },
        })
    }
}

/// Find `header` at the start of a line.
fn find_header(text: &str, header: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = text[from..].find(header) {
        let pos = from + rel;
        if pos == 0 || text.as_bytes()[pos - 1] == b'\n' {
            return Some(pos);
        }
        from = pos + header.len();
    }
    None
}

/// Extract (subject, global, local) when all three headers appear in order.
fn parse_sections(raw: &str) -> Option<(String, String, String)> {
    let s = find_header(raw, "SUBJECT:")?;
    let g = find_header(raw, "GLOBAL:")?;
    let l = find_header(raw, "LOCAL:")?;
    if !(s < g && g < l) {
        return None;
    }
    let subject = raw[s + "SUBJECT:".len()..g].trim().to_string();
    let global = raw[g + "GLOBAL:".len()..l].trim().to_string();
    let local = raw[l + "LOCAL:".len()..].trim().to_string();
    Some((subject, global, local))
}

/// Where a candidate set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    User,
    Nominated,
}

/// One answer hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 0-based position in the candidate set.
    pub index: usize,
    /// Display text, exactly as provided.
    pub label: String,
    /// Canonical form used for dedup and gold matching.
    pub normalized: String,
}

/// The ordered hypothesis space for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub source: CandidateSource,
}

impl CandidateSet {
    /// Build from caller-supplied labels: dedup by normalized form keeping
    /// first occurrences; too few or too many distinct labels is an error.
    pub fn from_user_labels(labels: &[String], max_candidates: usize) -> Result<Self> {
        let distinct = dedup_normalized(labels)?;
        if distinct.len() < 2 || distinct.len() > max_candidates {
            return Err(Error::CandidateCount {
                got: distinct.len(),
                max: max_candidates,
            });
        }
        Ok(CandidateSet {
            candidates: index_candidates(distinct),
            source: CandidateSource::User,
        })
    }

    /// Build from backend nomination output: dedup, then truncate to the
    /// configured bound; fewer than 2 distinct nominations is an error.
    pub fn from_nominated_labels(labels: &[String], max_candidates: usize) -> Result<Self> {
        let mut distinct = dedup_normalized(labels)?;
        if distinct.len() < 2 {
            return Err(Error::NominationEmpty);
        }
        distinct.truncate(max_candidates);
        Ok(CandidateSet {
            candidates: index_candidates(distinct),
            source: CandidateSource::Nominated,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

fn dedup_normalized(labels: &[String]) -> Result<Vec<(String, String)>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for label in labels {
        let normalized = normalize_candidate(label)?;
        if seen.insert(normalized.clone()) {
            out.push((label.trim().to_string(), normalized));
        }
    }
    Ok(out)
}

fn index_candidates(pairs: Vec<(String, String)>) -> Vec<Candidate> {
    pairs
        .into_iter()
        .enumerate()
        .map(|(index, (label, normalized))| Candidate {
            index,
            label,
            normalized,
        })
        .collect()
}

/// Canonicalize a label: Unicode case fold, trim, collapse internal
/// whitespace runs to single spaces. Idempotent.
pub fn normalize_candidate(label: &str) -> Result<String> {
    let folded = caseless::default_case_fold_str(label);
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(Error::EmptyAfterNormalization(label.to_string()));
    }
    Ok(collapsed)
}

/// A question split into stem and enumerated options.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedQuestion {
    /// Question text before the enumeration.
    pub stem: String,
    pub options: Vec<String>,
}

struct Marker {
    pos: usize,
    len: usize,
    letter: u8,
}

fn paren_markers(q: &str) -> Vec<Marker> {
    let bytes = q.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 2 < bytes.len() {
        if bytes[i] == b'(' && bytes[i + 1].is_ascii_uppercase() && bytes[i + 2] == b')' {
            out.push(Marker {
                pos: i,
                len: 3,
                letter: bytes[i + 1],
            });
            i += 3;
        } else {
            i += 1;
        }
    }
    out
}

/// Markers of the form "A." or "A)" sitting on whitespace boundaries.
fn boundary_markers(q: &str, tail: u8) -> Vec<Marker> {
    let bytes = q.as_bytes();
    let mut out = Vec::new();
    for i in 0..bytes.len().saturating_sub(1) {
        if bytes[i].is_ascii_uppercase() && bytes[i + 1] == tail {
            let left_ok = i == 0 || bytes[i - 1].is_ascii_whitespace();
            let right_ok = i + 2 < bytes.len() && bytes[i + 2].is_ascii_whitespace();
            if left_ok && right_ok {
                out.push(Marker {
                    pos: i,
                    len: 2,
                    letter: bytes[i],
                });
            }
        }
    }
    out
}

fn sequential_from_a(markers: &[Marker]) -> bool {
    markers.len() >= 2
        && markers
            .iter()
            .enumerate()
            .all(|(k, m)| m.letter == b'A' + k as u8)
}

fn extract_enumeration(q: &str, markers: &[Marker]) -> Option<ParsedQuestion> {
    let mut options = Vec::new();
    for (k, marker) in markers.iter().enumerate() {
        let end = markers.get(k + 1).map_or(q.len(), |next| next.pos);
        let mut text = q[marker.pos + marker.len..end].trim();
        // Enumerations often separate items with "," or ";".
        text = text
            .strip_suffix(',')
            .or_else(|| text.strip_suffix(';'))
            .unwrap_or(text)
            .trim_end();
        if text.is_empty() {
            return None;
        }
        options.push(text.to_string());
    }
    Some(ParsedQuestion {
        stem: q[..markers[0].pos].trim().to_string(),
        options,
    })
}

/// ASCII-case-insensitive substring search.
fn find_ci_ascii(haystack: &str, needle: &str) -> Option<usize> {
    let h = haystack.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return None;
    }
    (0..=h.len() - n.len()).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn split_or_ci(piece: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut rest = piece;
    while let Some(i) = find_ci_ascii(rest, " or ") {
        parts.push(&rest[..i]);
        rest = &rest[i + 4..];
    }
    parts.push(rest);
    parts
}

/// The "Options: a, b, or c" dialect; the list runs to the end of the line.
fn parse_options_list(q: &str) -> Option<ParsedQuestion> {
    const TOKEN: &str = "options:";
    let pos = find_ci_ascii(q, TOKEN)?;
    let boundary_ok = q[..pos].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
    if !boundary_ok {
        return None;
    }
    let after = &q[pos + TOKEN.len()..];
    let tail = after.split('\n').next().unwrap_or("");
    let options: Vec<String> = tail
        .split(',')
        .flat_map(split_or_ci)
        .map(str::trim)
        .map(|piece| match find_ci_ascii(piece, "or ") {
            Some(0) => piece["or ".len()..].trim(),
            _ => piece,
        })
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect();
    if options.len() < 2 {
        return None;
    }
    Some(ParsedQuestion {
        stem: q[..pos].trim().to_string(),
        options,
    })
}

/// Split a question into stem and options when it carries one of the
/// recognized enumeration dialects, tried in this fixed order:
/// `(A) …`, `A. …`, `A) …`, then `Options: a, b, or c`. Letters must run
/// sequentially from A. Unrecognized styles return `None` and flow on to
/// nomination rather than guessing.
pub fn parse_question(question: &str) -> Option<ParsedQuestion> {
    let paren = paren_markers(question);
    if sequential_from_a(&paren) {
        if let Some(parsed) = extract_enumeration(question, &paren) {
            return Some(parsed);
        }
    }
    for tail in [b'.', b')'] {
        let markers = boundary_markers(question, tail);
        if sequential_from_a(&markers) {
            if let Some(parsed) = extract_enumeration(question, &markers) {
                return Some(parsed);
            }
        }
    }
    parse_options_list(question)
}

/// Options parsed from the question text, if any.
pub fn parse_options(question: &str) -> Option<Vec<String>> {
    parse_question(question).map(|parsed| parsed.options)
}

/// Render a stem and options into the canonical "(A) …" enumeration.
/// Inverse of [`parse_question`] for plain labels.
pub fn render_options<S: AsRef<str>>(stem: &str, labels: &[S]) -> String {
    debug_assert!(labels.len() <= 26, "enumeration letters run A..Z");
    let mut out = String::new();
    if !stem.trim().is_empty() {
        out.push_str(stem.trim());
    }
    for (i, label) in labels.iter().enumerate() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push('(');
        out.push((b'A' + i as u8) as char);
        out.push_str(") ");
        out.push_str(label.as_ref());
    }
    out
}

/// The question as the look stage may see it: enumeration stripped to its
/// stem, and any known option strings removed outright.
fn question_context(request: &InferenceRequest) -> String {
    let parsed = parse_question(&request.question);
    let mut context = match &parsed {
        Some(parsed) => parsed.stem.clone(),
        None => request.question.clone(),
    };
    let mut shield: Vec<&String> = Vec::new();
    if let Some(options) = &request.explicit_options {
        shield.extend(options.iter());
    }
    if let Some(parsed) = &parsed {
        shield.extend(parsed.options.iter());
    }
    for option in shield {
        if !option.trim().is_empty() {
            context = context.replace(option.as_str(), " ");
        }
    }
    context.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Compose the look prompt: the objective-description preamble followed by
/// the question context, never any candidate label.
pub fn build_look_prompt(request: &InferenceRequest, pack: &PromptPack) -> String {
    let mut prompt = pack.look.trim_end().to_string();
    prompt.push_str("\n\nQUESTION CONTEXT: ");
    prompt.push_str(&question_context(request));
    prompt.push('\n');
    prompt
}

/// A prompt/response pair as recorded in traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
    pub cache_hit: bool,
}

/// Call the look backend and parse its description.
pub fn generate_description(
    request: &InferenceRequest,
    look_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
) -> Result<(StructuredDescription, Exchange)> {
    let prompt = build_look_prompt(request, pack);
    let completion = gateway.complete(
        &CompletionRequest::new(look_profile, prompt.clone()).with_image(&request.image_ref),
    )?;
    let description = StructuredDescription::from_raw(&completion.text)?;
    Ok((
        description,
        Exchange {
            prompt,
            response: completion.text,
            cache_hit: completion.cache_hit,
        },
    ))
}

/// Strip a leading bullet or enumeration marker from a nomination line.
fn strip_bullet(line: &str) -> &str {
    let mut rest = line.trim();
    for prefix in ["-", "*", "•"] {
        if let Some(stripped) = rest.strip_prefix(prefix) {
            rest = stripped.trim_start();
        }
    }
    let digits = rest.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let after = &rest[digits..];
        if let Some(stripped) = after.strip_prefix('.').or_else(|| after.strip_prefix(')')) {
            rest = stripped.trim_start();
        }
    }
    rest.trim()
}

/// Ask the nominate backend for a hypothesis list.
///
/// The prompt is text-only — the description plus the original question —
/// so nomination cannot peek at the image.
pub fn nominate_candidates(
    description: &StructuredDescription,
    question: &str,
    nominate_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
    max_candidates: usize,
) -> Result<(CandidateSet, Exchange)> {
    let mut prompt = pack.nominate.trim_end().to_string();
    prompt.push_str("\n\nDESCRIPTION:\n");
    prompt.push_str(&description.raw_text);
    prompt.push_str("\n\nQUESTION:\n");
    prompt.push_str(question);
    prompt.push('\n');

    let completion = gateway.complete(&CompletionRequest::new(nominate_profile, prompt.clone()))?;
    let labels: Vec<String> = completion
        .text
        .lines()
        .map(strip_bullet)
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect();
    let set = CandidateSet::from_nominated_labels(&labels, max_candidates)?;
    Ok((
        set,
        Exchange {
            prompt,
            response: completion.text,
            cache_hit: completion.cache_hit,
        },
    ))
}

/// How the candidate set was obtained, for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResolution {
    pub set: CandidateSet,
    /// Present only when the nominate backend was consulted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominate_exchange: Option<Exchange>,
}

/// Resolve the candidate set: explicit options > options parsed from the
/// question > backend nomination. The nominate profile is consulted only
/// on the last path, so it may be absent when options always arrive.
pub fn resolve_candidates(
    request: &InferenceRequest,
    description: &StructuredDescription,
    nominate_profile: Option<&str>,
    gateway: &Gateway,
    pack: &PromptPack,
    max_candidates: usize,
) -> Result<CandidateResolution> {
    if let Some(options) = &request.explicit_options {
        return Ok(CandidateResolution {
            set: CandidateSet::from_user_labels(options, max_candidates)?,
            nominate_exchange: None,
        });
    }
    if let Some(parsed) = parse_question(&request.question) {
        return Ok(CandidateResolution {
            set: CandidateSet::from_user_labels(&parsed.options, max_candidates)?,
            nominate_exchange: None,
        });
    }
    let nominate_profile = nominate_profile.ok_or_else(|| {
        Error::Config(
            "question carries no options and no nominate-role profile is configured".into(),
        )
    })?;
    let (set, exchange) = nominate_candidates(
        description,
        &request.question,
        nominate_profile,
        gateway,
        pack,
        max_candidates,
    )?;
    Ok(CandidateResolution {
        set,
        nominate_exchange: Some(exchange),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendProfile, GatewayOptions, Role};
    use std::io::Write;

    fn request(question: &str) -> InferenceRequest {
        InferenceRequest {
            image_ref: "images/leaf_001.jpg".into(),
            question: question.into(),
            explicit_options: None,
            request_id: "req-1".into(),
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_candidate("  Apple   SCAB ").unwrap(), "apple scab");
        assert_eq!(normalize_candidate("apple scab").unwrap(), "apple scab");
        assert!(matches!(
            normalize_candidate("   "),
            Err(Error::EmptyAfterNormalization(_))
        ));
    }

    #[test]
    fn normalization_matches_the_committed_folding_corpus() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/corpora/normalization_corpus.jsonl"
        );
        let raw = std::fs::read_to_string(path).unwrap();
        let mut checked = 0;
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let case: serde_json::Value = serde_json::from_str(line).unwrap();
            let input = case["input"].as_str().unwrap();
            let expected = case["normalized"].as_str().unwrap();
            assert_eq!(
                normalize_candidate(input).unwrap(),
                expected,
                "folding mismatch for {input:?}"
            );
            // Idempotence over the corpus.
            assert_eq!(normalize_candidate(expected).unwrap(), expected);
            checked += 1;
        }
        assert_eq!(checked, 50);
    }

    #[test]
    fn option_parser_matches_the_annotated_corpus() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/corpora/options_corpus.jsonl"
        );
        let raw = std::fs::read_to_string(path).unwrap();
        let mut checked = 0;
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let case: serde_json::Value = serde_json::from_str(line).unwrap();
            let question = case["question"].as_str().unwrap();
            let parsed = parse_question(question);
            match case["options"].as_array() {
                Some(expected) => {
                    let parsed = parsed.unwrap_or_else(|| panic!("no parse for {question:?}"));
                    let expected: Vec<&str> =
                        expected.iter().map(|v| v.as_str().unwrap()).collect();
                    assert_eq!(parsed.options, expected, "options for {question:?}");
                    assert_eq!(
                        parsed.stem,
                        case["stem"].as_str().unwrap(),
                        "stem for {question:?}"
                    );
                }
                None => assert!(parsed.is_none(), "unexpected parse for {question:?}"),
            }
            checked += 1;
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn worked_example_parses() {
        let parsed = parse_question("Which disease? (A) Apple Scab (B) Apple Rust").unwrap();
        assert_eq!(parsed.options, ["Apple Scab", "Apple Rust"]);
        assert_eq!(parsed.stem, "Which disease?");
        assert!(parse_options("What is this plant?").is_none());
        assert_eq!(
            parse_options("Options: Rust, Scab, or Mildew").unwrap(),
            ["Rust", "Scab", "Mildew"]
        );
    }

    #[test]
    fn render_then_parse_is_identity() {
        let labels = ["Apple Scab", "Cedar Apple Rust", "Powdery Mildew"];
        let rendered = render_options("Which disease?", &labels);
        assert_eq!(rendered, "Which disease? (A) Apple Scab (B) Cedar Apple Rust (C) Powdery Mildew");
        let parsed = parse_question(&rendered).unwrap();
        assert_eq!(parsed.options, labels);
        assert_eq!(parsed.stem, "Which disease?");
    }

    #[test]
    fn section_grammar_parses_the_scripted_shape() {
        let d = StructuredDescription::from_raw(
            "SUBJECT: apple leaf\nGLOBAL: mild chlorosis\nLOCAL: olive-brown velvety spots",
        )
        .unwrap();
        assert!(d.section_parse_ok);
        assert_eq!(d.subject, "apple leaf");
        assert_eq!(d.global_observations, "mild chlorosis");
        assert_eq!(d.local_observations, "olive-brown velvety spots");
    }

    #[test]
    fn headerless_response_degrades_to_raw_text() {
        let d = StructuredDescription::from_raw("a leaf with some spots").unwrap();
        assert!(!d.section_parse_ok);
        assert_eq!(d.raw_text, "a leaf with some spots");
        assert!(d.subject.is_empty());
        assert!(d.global_observations.is_empty());
        assert!(d.local_observations.is_empty());
    }

    #[test]
    fn out_of_order_headers_do_not_parse() {
        let d = StructuredDescription::from_raw("LOCAL: x\nGLOBAL: y\nSUBJECT: z").unwrap();
        assert!(!d.section_parse_ok);
    }

    #[test]
    fn empty_look_response_is_malformed() {
        assert!(matches!(
            StructuredDescription::from_raw("  \n"),
            Err(Error::MalformedResponse(_))
        ));
    }

    #[test]
    fn multiline_sections_are_captured() {
        let d = StructuredDescription::from_raw(
            "SUBJECT: vine\nGLOBAL: vigorous growth\noverall healthy\nLOCAL: spots\nalong veins",
        )
        .unwrap();
        assert!(d.section_parse_ok);
        assert_eq!(d.global_observations, "vigorous growth\noverall healthy");
        assert_eq!(d.local_observations, "spots\nalong veins");
    }

    #[test]
    fn look_prompt_contains_preamble_and_never_the_options() {
        let mut req = request("Which disease affects this leaf? (A) Apple Scab (B) Apple Rust");
        req.explicit_options = Some(vec!["Apple Scab".into(), "Apple Rust".into()]);
        let prompt = build_look_prompt(&req, &PromptPack::default());
        assert!(prompt.contains("concentric ring patterns, wavy edges"));
        assert!(prompt.contains("Which disease affects this leaf?"));
        assert!(!prompt.contains("Apple Scab"));
        assert!(!prompt.contains("Apple Rust"));
    }

    #[test]
    fn look_prompt_without_options_keeps_the_whole_question() {
        let prompt = build_look_prompt(&request("What is this plant?"), &PromptPack::default());
        assert!(prompt.contains("QUESTION CONTEXT: What is this plant?"));
    }

    #[test]
    fn look_prompt_scrubs_options_mentioned_in_prose() {
        let mut req = request("Could this be Apple Scab? It looks bad.");
        req.explicit_options = Some(vec!["Apple Scab".into(), "Apple Rust".into()]);
        let prompt = build_look_prompt(&req, &PromptPack::default());
        assert!(!prompt.contains("Apple Scab"));
        assert!(prompt.contains("Could this be ? It looks bad."));
    }

    #[test]
    fn look_prompt_override_is_used_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("look.txt"), "OVERRIDE LOOK PREAMBLE").unwrap();
        let pack = PromptPack::from_dir(dir.path()).unwrap();
        let prompt = build_look_prompt(&request("What is this?"), &pack);
        assert!(prompt.starts_with("OVERRIDE LOOK PREAMBLE\n\nQUESTION CONTEXT:"));
    }

    #[test]
    fn user_candidates_dedup_and_bound() {
        let set = CandidateSet::from_user_labels(
            &["Apple Scab".into(), " apple  scab ".into(), "Apple Rust".into()],
            8,
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.source, CandidateSource::User);
        assert_eq!(set.candidates[0].label, "Apple Scab");
        assert_eq!(set.candidates[0].normalized, "apple scab");
        assert_eq!(set.candidates[1].index, 1);

        let single = CandidateSet::from_user_labels(&["Apple Scab".into()], 8);
        assert!(matches!(single, Err(Error::CandidateCount { got: 1, max: 8 })));

        let many: Vec<String> = (0..9).map(|i| format!("option {i}")).collect();
        assert!(matches!(
            CandidateSet::from_user_labels(&many, 8),
            Err(Error::CandidateCount { got: 9, max: 8 })
        ));
    }

    #[test]
    fn bullets_and_numbers_strip_from_nominations() {
        assert_eq!(strip_bullet("1. Apple Scab"), "Apple Scab");
        assert_eq!(strip_bullet("12) Apple Rust"), "Apple Rust");
        assert_eq!(strip_bullet("- Downy Mildew"), "Downy Mildew");
        assert_eq!(strip_bullet("• Fire Blight"), "Fire Blight");
        assert_eq!(strip_bullet("* Leaf Spot"), "Leaf Spot");
        assert_eq!(strip_bullet("Plain Name"), "Plain Name");
    }

    fn gateway_with(lines: &[&str], profiles: Vec<BackendProfile>) -> Gateway {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        // Leak the tempdir so the fixture file outlives this helper; tests
        // are short-lived processes.
        std::mem::forget(dir);
        Gateway::new(
            profiles,
            GatewayOptions {
                fixtures_path: Some(path),
                ..GatewayOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn nomination_parses_dedups_and_truncates() {
        let gw = gateway_with(
            &[r#"{"profile":"nominate-main","match":{"contains":"DESCRIPTION:"},"response":"1. Apple Scab\n2. Apple Rust\n3. Apple Scab"}"#],
            vec![BackendProfile::scripted("nominate-main", Role::Nominate)],
        );
        let d = StructuredDescription::from_raw("SUBJECT: leaf\nGLOBAL: ok\nLOCAL: spots").unwrap();
        let (set, exchange) =
            nominate_candidates(&d, "What disease?", "nominate-main", &gw, &PromptPack::default(), 8)
                .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.source, CandidateSource::Nominated);
        assert_eq!(set.candidates[1].label, "Apple Rust");
        assert!(exchange.prompt.contains("hypothesis generator"));
        assert!(exchange.prompt.contains("QUESTION:\nWhat disease?"));
    }

    #[test]
    fn single_nomination_is_an_error() {
        let gw = gateway_with(
            &[r#"{"profile":"nominate-main","match":{"contains":"DESCRIPTION:"},"response":"Apple Scab"}"#],
            vec![BackendProfile::scripted("nominate-main", Role::Nominate)],
        );
        let d = StructuredDescription::from_raw("plain").unwrap();
        let err = nominate_candidates(&d, "q", "nominate-main", &gw, &PromptPack::default(), 8)
            .unwrap_err();
        assert!(matches!(err, Error::NominationEmpty));
    }

    #[test]
    fn twelve_nominations_truncate_to_max() {
        let names: Vec<String> = (1..=12).map(|i| format!("{i}. Disease {i:02}")).collect();
        let gw = gateway_with(
            &[&format!(
                r#"{{"profile":"nominate-main","match":{{"contains":"DESCRIPTION:"}},"response":"{}"}}"#,
                names.join("\\n")
            )],
            vec![BackendProfile::scripted("nominate-main", Role::Nominate)],
        );
        let d = StructuredDescription::from_raw("plain").unwrap();
        let (set, _) =
            nominate_candidates(&d, "q", "nominate-main", &gw, &PromptPack::default(), 8).unwrap();
        assert_eq!(set.len(), 8);
        assert_eq!(set.candidates[7].label, "Disease 08");
    }

    #[test]
    fn resolution_precedence_explicit_then_parsed_then_nominated() {
        let gw = gateway_with(
            &[r#"{"profile":"nominate-main","match":{"contains":"DESCRIPTION:"},"response":"Downy Mildew\nPowdery Mildew"}"#],
            vec![BackendProfile::scripted("nominate-main", Role::Nominate)],
        );
        let d = StructuredDescription::from_raw("plain").unwrap();
        let pack = PromptPack::default();

        // Explicit options beat an enumerating question.
        let mut req = request("Pick: (A) Wrong (B) Other");
        req.explicit_options = Some(vec!["Right".into(), "Also Right".into()]);
        let resolved = resolve_candidates(&req, &d, Some("nominate-main"), &gw, &pack, 8).unwrap();
        assert_eq!(resolved.set.candidates[0].label, "Right");
        assert_eq!(resolved.set.source, CandidateSource::User);
        assert!(resolved.nominate_exchange.is_none());

        // Parseable question, no explicit options.
        let resolved =
            resolve_candidates(&request("Pick: (A) Wrong (B) Other"), &d, Some("nominate-main"), &gw, &pack, 8)
                .unwrap();
        assert_eq!(resolved.set.candidates[1].label, "Other");
        assert_eq!(resolved.set.source, CandidateSource::User);

        // Neither: nomination runs.
        let resolved =
            resolve_candidates(&request("What is this?"), &d, Some("nominate-main"), &gw, &pack, 8)
                .unwrap();
        assert_eq!(resolved.set.source, CandidateSource::Nominated);
        assert_eq!(resolved.set.len(), 2);
        assert!(resolved.nominate_exchange.is_some());
        let stats = gw.stats("nominate-main").unwrap();
        assert_eq!(stats.invocations + stats.cache_hits, 1, "nominated exactly once");
    }

    #[test]
    fn generate_description_records_the_exchange() {
        let gw = gateway_with(
            &[r#"{"profile":"look-main","match":{"contains":"QUESTION CONTEXT:"},"response":"SUBJECT: apple leaf\nGLOBAL: mild chlorosis\nLOCAL: olive-brown velvety spots"}"#],
            vec![BackendProfile::scripted("look-main", Role::Look)],
        );
        let (d, exchange) = generate_description(
            &request("Which disease affects this leaf? (A) Apple Scab (B) Apple Rust"),
            "look-main",
            &gw,
            &PromptPack::default(),
        )
        .unwrap();
        assert!(d.section_parse_ok);
        assert_eq!(d.subject, "apple leaf");
        assert!(exchange.prompt.contains("professional plant pathologist"));
        assert!(!exchange.prompt.contains("Apple Scab"));
        assert!(exchange.response.starts_with("SUBJECT:"));
    }
}
