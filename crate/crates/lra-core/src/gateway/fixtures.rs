//! Scripted backend fixtures.
//!
//! A fixture file is JSONL: one object per line with the target `profile`,
//! a `match` rule against the rendered prompt, the canned `response`, and
//! optionally `continuation_logprobs` for forced-continuation scoring.
//! Lookup is first-match in file order, which lets a file put specific
//! rules above broad fallbacks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{BackendProfile, CompletionRequest, CompletionResult};

/// Prompt-matching rule for one fixture line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureMatch {
    /// The rendered prompt must equal this string byte-for-byte.
    Exact(String),
    /// The rendered prompt must contain this substring.
    Contains(String),
}

impl FixtureMatch {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            FixtureMatch::Exact(expected) => prompt == expected,
            FixtureMatch::Contains(needle) => prompt.contains(needle),
        }
    }
}

/// One scripted response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixture {
    pub profile: String,
    #[serde(rename = "match")]
    pub matcher: FixtureMatch,
    pub response: String,
    /// Token logprobs to report when the request forces a continuation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation_logprobs: Option<Vec<(String, f64)>>,
}

/// Load a fixture file, rejecting unparseable lines with their line number.
pub fn load_fixtures(path: &Path) -> Result<Vec<Fixture>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut fixtures = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fixture: Fixture = serde_json::from_str(line)
            .map_err(|e| Error::file(path, format!("fixture line {}: {e}", idx + 1)))?;
        fixtures.push(fixture);
    }
    Ok(fixtures)
}

/// Resolve a request against the fixture table for a scripted profile.
pub(super) fn scripted_lookup(
    fixtures: &[Fixture],
    profile: &BackendProfile,
    request: &CompletionRequest,
) -> Result<CompletionResult> {
    let hit = fixtures
        .iter()
        .find(|f| f.profile == profile.id && f.matcher.matches(&request.prompt))
        .ok_or_else(|| Error::FixtureMiss {
            profile: profile.id.clone(),
        })?;

    let token_logprobs = if request.forced_continuation.is_some() {
        match &hit.continuation_logprobs {
            Some(lps) if !lps.is_empty() => Some(lps.clone()),
            _ => {
                return Err(Error::MalformedResponse(format!(
                    "fixture for profile `{}` matched a forced-continuation request \
                     but carries no continuation_logprobs",
                    profile.id
                )))
            }
        }
    } else {
        None
    };

    Ok(CompletionResult {
        text: hit.response.clone(),
        token_logprobs,
        cache_hit: false,
        latency_ms: 0,
    })
}
