//! The answer stage: parallel evidence alignment and argmax selection.
//!
//! Every candidate's evidence chain — the visual description `D` paired
//! with its recited knowledge `K_i` — is scored independently by a frozen
//! reasoning backend, and the candidate with the highest score wins. Two
//! scoring modes exist: *judge* asks for a keyed consistency report ending
//! in an integer score, and works against any backend; *logprob* forces
//! the candidate label as a continuation and multiplies its token
//! probabilities, which requires a backend that can echo logprobs. Scores
//! are comparable only within a single request and are never renormalized.
//!
//! No prompt in this module ever carries the image: the answer stage sees
//! the world only through `D`.

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::parallel::bounded_map;
use crate::perception::{Candidate, CandidateSet, StructuredDescription};
use crate::prompts::PromptPack;
use crate::recite::RecitedKnowledge;
use crate::{Error, Result};

/// Which scoring procedure produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Keyed judge report; works on any backend.
    #[default]
    Judge,
    /// Product of forced-continuation token probabilities.
    Logprob,
}

/// How completely the recited knowledge accounts for the evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CoverageLevel {
    Full,
    Partial,
    None,
}

impl CoverageLevel {
    fn parse(value: &str) -> Option<Self> {
        match value.trim().to_uppercase().as_str() {
            "FULL" => Some(CoverageLevel::Full),
            "PARTIAL" => Some(CoverageLevel::Partial),
            "NONE" => Some(CoverageLevel::None),
            _ => None,
        }
    }
}

/// Parsed judge report for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    /// Attributes in the description that the knowledge accounts for.
    pub support: Vec<String>,
    /// Knowledge features absent from or negated by the description.
    pub contradictions: Vec<String>,
    pub coverage: CoverageLevel,
    /// Raw integer consistency score, clamped to `[0, 100]`.
    pub score_raw: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// One candidate's score, with full provenance for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateVerdict {
    pub candidate_index: usize,
    /// Judge mode: `score_raw / 100` in `[0, 1]`. Logprob mode:
    /// `exp(Σ token logprobs)` in `(0, 1]`.
    pub score: f64,
    pub mode: ScoringMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub cache_hit: bool,
}

/// The final decision plus everything it was based on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub chosen: Candidate,
    /// One verdict per candidate, in candidate order.
    pub verdicts: Vec<CandidateVerdict>,
    /// True when another candidate attained the same maximum score.
    pub tie_broken: bool,
}

/// Fixed preamble for forced-continuation scoring.
pub const ANSWER_PREAMBLE: &str = "Compare the visual evidence against the reference knowledge \
and answer with the name of the single condition the evidence most supports.";

/// Build the logprob-mode scoring prompt. Ends with `Answer:` so the
/// forced continuation reads as the model's own answer.
pub fn build_logprob_prompt(description: &StructuredDescription, knowledge: &RecitedKnowledge) -> String {
    format!(
        "{ANSWER_PREAMBLE}\n\nEVIDENCE:\n{}\n\nKNOWLEDGE:\n{}\n\nAnswer:",
        description.raw_text, knowledge.text
    )
}

/// Score one candidate by forcing its label as the continuation and
/// multiplying the returned token probabilities.
pub fn score_logprob(
    description: &StructuredDescription,
    knowledge: &RecitedKnowledge,
    candidate: &Candidate,
    answer_profile: &str,
    gateway: &Gateway,
) -> Result<CandidateVerdict> {
    let profile = gateway.profile(answer_profile)?;
    if !profile.supports_logprobs {
        return Err(Error::LogprobsUnsupported(answer_profile.to_string()));
    }
    let request = CompletionRequest::new(answer_profile, build_logprob_prompt(description, knowledge))
        .with_forced_continuation(&candidate.label);
    let completion = gateway.complete(&request)?;
    let token_logprobs = completion.token_logprobs.ok_or_else(|| {
        Error::MalformedResponse("forced continuation returned no token logprobs".into())
    })?;
    if token_logprobs.is_empty() {
        return Err(Error::MalformedResponse(
            "forced continuation returned an empty logprob list".into(),
        ));
    }
    let total: f64 = token_logprobs.iter().map(|(_, lp)| lp).sum();
    Ok(CandidateVerdict {
        candidate_index: candidate.index,
        score: total.exp(),
        mode: ScoringMode::Logprob,
        judge: None,
        token_logprobs: Some(token_logprobs),
        cache_hit: completion.cache_hit,
    })
}

/// The keyed report format appended to every judge prompt. Kept in code —
/// not in the prompt pack — so pack overrides cannot break parsing.
pub const JUDGE_FORMAT: &str = "Respond with exactly these four keyed lines, in this order:\n\
SUPPORT: <attributes in the evidence that the knowledge accounts for, separated by semicolons>\n\
CONTRADICT: <knowledge features absent from or negated by the evidence, separated by semicolons>\n\
COVERAGE: <FULL, PARTIAL, or NONE>\n\
SCORE: <integer from 0 to 100>\n\
Lines after SCORE are read as rationale.";

/// Build the judge-mode prompt: pack judge text, then the fixed report
/// format, then the evidence chain. Contains `D` and `K_i` verbatim.
pub fn build_judge_prompt(
    description: &StructuredDescription,
    knowledge: &RecitedKnowledge,
    candidate: &Candidate,
    pack: &PromptPack,
) -> String {
    format!(
        "{}\n\n{JUDGE_FORMAT}\n\nEVIDENCE DESCRIPTION:\n{}\n\nCANDIDATE:\n{}\n\nREFERENCE KNOWLEDGE:\n{}\n",
        pack.judge.trim_end(),
        description.raw_text,
        candidate.label,
        knowledge.text
    )
}

/// Split a keyed line off `line` if it starts with `key:` (any case).
fn keyed_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let trimmed = line.trim_start();
    if trimmed.len() >= key.len() + 1
        && trimmed[..key.len()].eq_ignore_ascii_case(key)
        && trimmed[key.len()..].starts_with(':')
    {
        Some(trimmed[key.len() + 1..].trim())
    } else {
        None
    }
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(';')
        .map(str::trim)
        .filter(|item| !item.is_empty() && !item.eq_ignore_ascii_case("none"))
        .map(str::to_string)
        .collect()
}

/// Parse a judge response. Keys match case-insensitively; list values
/// split on semicolons; SCORE clamps to `[0, 100]`; free text after the
/// last keyed line becomes the rationale.
pub fn parse_judge_output(text: &str) -> Result<JudgeOutput> {
    let mut support: Option<Vec<String>> = None;
    let mut contradictions: Option<Vec<String>> = None;
    let mut coverage: Option<CoverageLevel> = None;
    let mut score_raw: Option<u8> = None;
    let mut rationale_lines: Vec<&str> = Vec::new();

    for line in text.lines() {
        if let Some(value) = keyed_value(line, "SUPPORT") {
            if support.is_none() {
                support = Some(split_list(value));
                rationale_lines.clear();
                continue;
            }
        }
        if let Some(value) = keyed_value(line, "CONTRADICT") {
            if contradictions.is_none() {
                contradictions = Some(split_list(value));
                rationale_lines.clear();
                continue;
            }
        }
        if let Some(value) = keyed_value(line, "COVERAGE") {
            if coverage.is_none() {
                coverage = Some(
                    CoverageLevel::parse(value)
                        .ok_or_else(|| Error::MalformedCoverage(value.to_string()))?,
                );
                rationale_lines.clear();
                continue;
            }
        }
        if let Some(value) = keyed_value(line, "SCORE") {
            if score_raw.is_none() {
                let parsed: i64 = value.parse().map_err(|_| Error::MissingScore)?;
                score_raw = Some(parsed.clamp(0, 100) as u8);
                rationale_lines.clear();
                continue;
            }
        }
        rationale_lines.push(line);
    }

    let score_raw = score_raw.ok_or(Error::MissingScore)?;
    let coverage =
        coverage.ok_or_else(|| Error::MalformedCoverage("<missing COVERAGE line>".into()))?;
    let rationale = {
        let joined = rationale_lines.join("\n").trim().to_string();
        (!joined.is_empty()).then_some(joined)
    };
    Ok(JudgeOutput {
        support: support.unwrap_or_default(),
        contradictions: contradictions.unwrap_or_default(),
        coverage,
        score_raw,
        rationale,
    })
}

/// Score one candidate with the judge report. A malformed first response
/// earns exactly one retry with a format reminder appended.
pub fn score_judge(
    description: &StructuredDescription,
    knowledge: &RecitedKnowledge,
    candidate: &Candidate,
    answer_profile: &str,
    gateway: &Gateway,
    pack: &PromptPack,
) -> Result<CandidateVerdict> {
    let prompt = build_judge_prompt(description, knowledge, candidate, pack);
    let mut attempt_prompt = prompt.clone();
    let mut last_err = None;
    for attempt in 0..2 {
        let completion = gateway.complete(&CompletionRequest::new(answer_profile, attempt_prompt.clone()))?;
        match parse_judge_output(&completion.text) {
            Ok(judge) => {
                return Ok(CandidateVerdict {
                    candidate_index: candidate.index,
                    score: f64::from(judge.score_raw) / 100.0,
                    mode: ScoringMode::Judge,
                    judge: Some(judge),
                    token_logprobs: None,
                    cache_hit: completion.cache_hit,
                });
            }
            Err(err) => {
                last_err = Some(err);
                if attempt == 0 {
                    attempt_prompt = format!("{prompt}\n\nRespond in the exact keyed format.");
                }
            }
        }
    }
    Err(last_err.expect("two attempts always set an error"))
}

/// Everything the answer stage needs from the configuration.
pub struct VerdictDeps<'a> {
    pub gateway: &'a Gateway,
    pub answer_profile: &'a str,
    pub pack: &'a PromptPack,
    pub mode: ScoringMode,
    pub concurrency_limit: usize,
}

/// Score every candidate under the bounded fan-out, in candidate order.
/// Any single failure aborts the stage, naming the candidate.
pub fn score_all(
    description: &StructuredDescription,
    candidates: &CandidateSet,
    knowledge: &[RecitedKnowledge],
    deps: &VerdictDeps<'_>,
) -> Result<Vec<CandidateVerdict>> {
    if knowledge.len() != candidates.candidates.len() {
        return Err(Error::IncompleteVerdicts);
    }
    let outcomes = bounded_map(
        &candidates.candidates,
        deps.concurrency_limit,
        |index, candidate| match deps.mode {
            ScoringMode::Judge => score_judge(
                description,
                &knowledge[index],
                candidate,
                deps.answer_profile,
                deps.gateway,
                deps.pack,
            ),
            ScoringMode::Logprob => score_logprob(
                description,
                &knowledge[index],
                candidate,
                deps.answer_profile,
                deps.gateway,
            ),
        },
    );
    let mut verdicts = Vec::with_capacity(outcomes.len());
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(verdict) => verdicts.push(verdict),
            Err(cause) => {
                return Err(Error::Stage {
                    stage: "answer",
                    candidate_index: index,
                    cause: Box::new(cause),
                })
            }
        }
    }
    Ok(verdicts)
}

/// Pick the winner: maximum score, ties to the least candidate index.
/// Scores are taken as-is — never renormalized.
pub fn select(candidates: &CandidateSet, verdicts: Vec<CandidateVerdict>) -> Result<Prediction> {
    if verdicts.is_empty() {
        return Err(Error::EmptyVerdicts);
    }
    if verdicts.iter().any(|v| v.mode != verdicts[0].mode) {
        return Err(Error::MixedModes);
    }
    if verdicts.len() != candidates.candidates.len()
        || verdicts.iter().enumerate().any(|(i, v)| v.candidate_index != i)
    {
        return Err(Error::IncompleteVerdicts);
    }
    let mut best = 0usize;
    for (index, verdict) in verdicts.iter().enumerate() {
        if verdict.score > verdicts[best].score {
            best = index;
        }
    }
    let tie_broken = verdicts
        .iter()
        .enumerate()
        .any(|(index, verdict)| index != best && verdict.score == verdicts[best].score);
    Ok(Prediction {
        chosen: candidates.candidates[best].clone(),
        verdicts,
        tie_broken,
    })
}
