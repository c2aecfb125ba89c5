//! The recite stage: candidate-guided knowledge retrieval.
//!
//! Each candidate is turned into a minimal, neutral retrieval query — by
//! template rendering or by a served router model — and the query is sent
//! to the frozen recite backend, which answers from its parametric memory.
//! No external search is involved anywhere. Candidates are processed under
//! a bounded fan-out and reassembled in candidate order, so results never
//! depend on completion order or the concurrency limit.

use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway};
use crate::parallel::bounded_map;
use crate::perception::{Candidate, CandidateSet, Exchange, StructuredDescription};
use crate::prompts::Lexicon;
use crate::template::{self, TemplateId};
use crate::{Error, Result};

/// How retrieval queries are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// Render the canonical symptom-knowledge template directly. This is
    /// exactly the trained router's target function, without weights.
    #[default]
    Template,
    /// Ask a served router backend, falling back to the template when its
    /// output is not a valid template instance.
    Model,
}

/// Organ/host context inferred for the current request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextHint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ: Option<String>,
    /// "host organ" with absent parts dropped; `None` when both are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered: Option<String>,
}

/// Pull host and organ hints out of the description and question.
/// The organ comes from the description (first lexicon match in text
/// order); the host is looked for in the question first, then the
/// description.
pub fn extract_context(
    description: &StructuredDescription,
    question: &str,
    organs: &Lexicon,
    hosts: &Lexicon,
) -> ContextHint {
    let organ = organs.first_match(&description.raw_text).map(str::to_string);
    let host = hosts
        .first_match(question)
        .or_else(|| hosts.first_match(&description.raw_text))
        .map(str::to_string);
    let rendered = match (&host, &organ) {
        (None, None) => None,
        (host, organ) => Some(
            [host.as_deref(), organ.as_deref()]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join(" "),
        ),
    };
    ContextHint {
        host,
        organ,
        rendered,
    }
}

/// One retrieval query, ready to send to the recite backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub candidate_index: usize,
    pub query_text: String,
    pub mode: RouterMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<TemplateId>,
}

/// Render the canonical symptom-knowledge query for a candidate.
pub fn render_template_query(candidate: &Candidate, context: &ContextHint) -> RetrievalQuery {
    RetrievalQuery {
        candidate_index: candidate.index,
        query_text: template::render_symptom_query(&candidate.label, context.rendered.as_deref()),
        mode: RouterMode::Template,
        template_id: Some(TemplateId::SymptomKnowledge),
    }
}

/// Check that a template-mode query carries nothing beyond the fixed
/// template words, the candidate label, and the context words.
pub fn template_query_is_neutral(query: &str, label: &str, context: Option<&str>) -> bool {
    fn clean(word: &str) -> String {
        word.trim_matches('.').to_lowercase()
    }
    let mut allowed: std::collections::HashSet<String> = ["retrieve", "symptom", "knowledge", "of", "on"]
        .into_iter()
        .map(str::to_string)
        .collect();
    allowed.extend(label.split_whitespace().map(clean));
    if let Some(context) = context {
        allowed.extend(context.split_whitespace().map(clean));
    }
    query
        .split_whitespace()
        .map(|word| clean(word))
        .all(|word| word.is_empty() || allowed.contains(&word))
}

/// Ask the served router for a query; invalid output falls back to the
/// template and the reason is reported alongside (not as an error).
pub fn route_with_model(
    description: &StructuredDescription,
    candidate: &Candidate,
    question: &str,
    context: &ContextHint,
    router_profile: &str,
    gateway: &Gateway,
) -> Result<(RetrievalQuery, Option<String>, Exchange)> {
    let prompt = format!(
        "DESCRIPTION:\n{}\n\nCANDIDATE:\n{}\n\nQUESTION:\n{}\n",
        description.raw_text, candidate.label, question
    );
    let completion = gateway.complete(&CompletionRequest::new(router_profile, prompt.clone()))?;
    let proposed = completion.text.trim();
    let check = template::validate_instruction_template(proposed);
    let exchange = Exchange {
        prompt,
        response: completion.text.clone(),
        cache_hit: completion.cache_hit,
    };
    if check.accepted {
        Ok((
            RetrievalQuery {
                candidate_index: candidate.index,
                query_text: proposed.to_string(),
                mode: RouterMode::Model,
                template_id: check.template_id,
            },
            None,
            exchange,
        ))
    } else {
        let reason = format!(
            "router output rejected ({} at byte {}); used template fallback",
            check.reason.unwrap_or_else(|| "no reason".into()),
            check.failed_at.unwrap_or(0),
        );
        Ok((render_template_query(candidate, context), Some(reason), exchange))
    }
}

/// Knowledge recited for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecitedKnowledge {
    pub candidate_index: usize,
    /// The recitation text, always non-empty.
    pub text: String,
    pub query: RetrievalQuery,
    pub backend_profile_id: String,
    pub cache_hit: bool,
}

/// Send one query to the recite backend.
pub fn recite_one(
    query: &RetrievalQuery,
    recite_profile: &str,
    gateway: &Gateway,
) -> Result<RecitedKnowledge> {
    let completion =
        gateway.complete(&CompletionRequest::new(recite_profile, query.query_text.clone()))?;
    if completion.text.trim().is_empty() {
        return Err(Error::MalformedResponse(
            "recite backend returned empty knowledge".into(),
        ));
    }
    Ok(RecitedKnowledge {
        candidate_index: query.candidate_index,
        text: completion.text,
        query: query.clone(),
        backend_profile_id: recite_profile.to_string(),
        cache_hit: completion.cache_hit,
    })
}

/// Everything the recite stage needs from the configuration.
pub struct ReciteDeps<'a> {
    pub gateway: &'a Gateway,
    pub recite_profile: &'a str,
    /// Required iff `mode` is [`RouterMode::Model`].
    pub router_profile: Option<&'a str>,
    pub organs: &'a Lexicon,
    pub hosts: &'a Lexicon,
    pub mode: RouterMode,
    pub concurrency_limit: usize,
}

/// Recite-stage result for one candidate, with routing provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciteItem {
    pub knowledge: RecitedKnowledge,
    /// The router call, when model routing ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_exchange: Option<Exchange>,
    /// Why the router's output was discarded, when it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

/// Completed recite stage: one item per candidate plus the shared context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReciteOutcome {
    pub context: ContextHint,
    pub items: Vec<ReciteItem>,
}

/// Run the recite stage: route and recite every candidate, in candidate
/// order, with at most `concurrency_limit` backend calls in flight. Any
/// single candidate failure aborts the stage, naming the candidate.
pub fn recite_all(
    description: &StructuredDescription,
    candidates: &CandidateSet,
    question: &str,
    deps: &ReciteDeps<'_>,
) -> Result<ReciteOutcome> {
    let context = extract_context(description, question, deps.organs, deps.hosts);
    if deps.mode == RouterMode::Model && deps.router_profile.is_none() {
        return Err(Error::Config(
            "router mode is `model` but no router profile is bound".into(),
        ));
    }

    let outcomes = bounded_map(
        &candidates.candidates,
        deps.concurrency_limit,
        |_, candidate| {
            let (query, fallback, router_exchange) = match deps.mode {
                RouterMode::Template => (render_template_query(candidate, &context), None, None),
                RouterMode::Model => {
                    let (query, fallback, exchange) = route_with_model(
                        description,
                        candidate,
                        question,
                        &context,
                        deps.router_profile.expect("checked above"),
                        deps.gateway,
                    )?;
                    (query, fallback, Some(exchange))
                }
            };
            let knowledge = recite_one(&query, deps.recite_profile, deps.gateway)?;
            Ok(ReciteItem {
                knowledge,
                router_exchange,
                fallback,
            })
        },
    );

    let mut items = Vec::with_capacity(outcomes.len());
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(item) => items.push(item),
            Err(cause) => {
                return Err(Error::Stage {
                    stage: "recite",
                    candidate_index: index,
                    cause: Box::new(cause),
                })
            }
        }
    }
    Ok(ReciteOutcome { context, items })
}
