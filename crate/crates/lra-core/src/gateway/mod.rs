//! Uniform access to the frozen model backends.
//!
//! Every stage of the pipeline talks to its backend through [`Gateway`],
//! which owns the profile table, the scripted-fixture set, the persistent
//! response cache, and per-profile call counters. Stages never construct
//! HTTP clients or read fixture files themselves, so swapping a live
//! backend for a scripted one never touches stage code.

mod cache;
mod fixtures;
mod http;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheEntry};
pub use fixtures::{Fixture, FixtureMatch};

use crate::{Error, Result};

/// Pipeline role a backend profile is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Look,
    Nominate,
    Router,
    Recite,
    Answer,
    Teacher,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Look => "look",
            Role::Nominate => "nominate",
            Role::Router => "router",
            Role::Recite => "recite",
            Role::Answer => "answer",
            Role::Teacher => "teacher",
        }
    }
}

/// How a profile's completions are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Responses come from a committed fixture file; no network.
    Scripted,
    /// Responses come from an OpenAI-compatible chat-completions server.
    Http,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_frozen() -> bool {
    true
}

/// A named, frozen backend configuration.
///
/// Profiles are declared in the run configuration and referenced by id from
/// role bindings. `frozen` is an assertion, not a switch: the engine never
/// issues training or fine-tuning calls, and the flag exists so a config
/// diff shows when someone points a role at a mutable endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendProfile {
    pub id: String,
    pub role: Role,
    pub kind: BackendKind,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default = "default_frozen")]
    pub frozen: bool,
}

impl BackendProfile {
    /// Cheap shorthand for a scripted profile, used widely in tests.
    pub fn scripted(id: &str, role: Role) -> Self {
        BackendProfile {
            id: id.to_string(),
            role,
            kind: BackendKind::Scripted,
            model_name: format!("scripted/{id}"),
            endpoint: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            supports_logprobs: false,
            frozen: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Config("backend profile with empty id".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(Error::Config(format!(
                "profile `{}` has an empty model_name",
                self.id
            )));
        }
        if self.kind == BackendKind::Http && self.endpoint.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Config(format!(
                "http profile `{}` has no endpoint",
                self.id
            )));
        }
        if !self.frozen {
            return Err(Error::Config(format!(
                "profile `{}` is not marked frozen; the engine only drives frozen backends",
                self.id
            )));
        }
        Ok(())
    }
}

/// Per-request sampling overrides; unset fields fall back to the profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamsOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// One completion call, addressed to a profile by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub profile_id: String,
    pub prompt: String,
    /// When set, the backend is asked to score this exact continuation
    /// instead of sampling freely; token logprobs must come back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_continuation: Option<String>,
    /// Opaque image reference forwarded to multimodal backends. Only the
    /// look profile ever receives one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_override: Option<ParamsOverride>,
}

impl CompletionRequest {
    pub fn new(profile_id: &str, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            profile_id: profile_id.to_string(),
            prompt: prompt.into(),
            forced_continuation: None,
            image_ref: None,
            params_override: None,
        }
    }

    pub fn with_image(mut self, image_ref: &str) -> Self {
        self.image_ref = Some(image_ref.to_string());
        self
    }

    pub fn with_forced_continuation(mut self, continuation: &str) -> Self {
        self.forced_continuation = Some(continuation.to_string());
        self
    }
}

/// What a completion call produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// Per-token logprobs of the forced continuation, present only when the
    /// request forced one and the backend reported them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
    /// True when the result came from the persistent cache.
    #[serde(default)]
    pub cache_hit: bool,
    /// Wall time of the backend call; 0 for cache hits and for runs where
    /// every profile is scripted (so traces stay byte-reproducible).
    #[serde(default)]
    pub latency_ms: u64,
}

/// Monotonic per-profile counters, readable at any time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallStats {
    /// Backend invocations (fixture lookups or HTTP calls); cache hits are
    /// not invocations.
    pub invocations: u64,
    pub cache_hits: u64,
    /// Total HTTP retries across all calls for this profile.
    pub retries: u64,
}

#[derive(Default)]
struct ProfileCounters {
    invocations: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
}

/// Tuning knobs that do not belong in the user-facing run configuration.
#[derive(Debug, Clone)]
pub struct GatewayOptions {
    /// Scripted fixture file (JSONL); required if any profile is scripted.
    pub fixtures_path: Option<PathBuf>,
    /// Persistent response cache (JSONL, append-only). `None` keeps the
    /// cache in memory only.
    pub cache_path: Option<PathBuf>,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            fixtures_path: None,
            cache_path: None,
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_secs: 60,
        }
    }
}

/// The single entry point stages use to reach any backend.
pub struct Gateway {
    profiles: BTreeMap<String, BackendProfile>,
    fixtures: Vec<Fixture>,
    cache: cache::Cache,
    http: Option<http::HttpBackend>,
    counters: BTreeMap<String, ProfileCounters>,
    deterministic: bool,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("profiles", &self.profiles.keys().collect::<Vec<_>>())
            .field("fixtures", &self.fixtures.len())
            .field("deterministic", &self.deterministic)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(profiles: Vec<BackendProfile>, options: GatewayOptions) -> Result<Self> {
        let mut table = BTreeMap::new();
        for profile in profiles {
            profile.validate()?;
            if table.insert(profile.id.clone(), profile.clone()).is_some() {
                return Err(Error::Config(format!(
                    "duplicate backend profile id `{}`",
                    profile.id
                )));
            }
        }
        if table.is_empty() {
            return Err(Error::Config("no backend profiles configured".into()));
        }

        let any_scripted = table.values().any(|p| p.kind == BackendKind::Scripted);
        let any_http = table.values().any(|p| p.kind == BackendKind::Http);

        let fixtures = match (&options.fixtures_path, any_scripted) {
            (Some(path), _) => fixtures::load_fixtures(path)?,
            (None, true) => {
                return Err(Error::Config(
                    "scripted profiles configured but no fixtures file given".into(),
                ))
            }
            (None, false) => Vec::new(),
        };

        let cache = cache::Cache::open(options.cache_path.as_deref())?;
        let http = if any_http {
            Some(http::HttpBackend::new(
                options.max_retries,
                options.backoff_base_ms,
                options.timeout_secs,
            )?)
        } else {
            None
        };

        let counters = table
            .keys()
            .map(|id| (id.clone(), ProfileCounters::default()))
            .collect();

        Ok(Gateway {
            profiles: table,
            fixtures,
            cache,
            http,
            counters,
            deterministic: !any_http,
        })
    }

    /// True when every profile is scripted: all timing fields are zeroed and
    /// trace timestamps are pinned, so repeated runs serialize identically.
    pub fn deterministic_timing(&self) -> bool {
        self.deterministic
    }

    pub fn profile(&self, id: &str) -> Result<&BackendProfile> {
        self.profiles
            .get(id)
            .ok_or_else(|| Error::UnknownProfile(id.to_string()))
    }

    /// Counter snapshot for one profile.
    pub fn stats(&self, profile_id: &str) -> Result<CallStats> {
        let c = self
            .counters
            .get(profile_id)
            .ok_or_else(|| Error::UnknownProfile(profile_id.to_string()))?;
        Ok(CallStats {
            invocations: c.invocations.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            retries: c.retries.load(Ordering::Relaxed),
        })
    }

    /// Counter snapshots for every profile, keyed by id.
    pub fn all_stats(&self) -> BTreeMap<String, CallStats> {
        self.counters
            .keys()
            .map(|id| (id.clone(), self.stats(id).expect("counter exists")))
            .collect()
    }

    /// Execute one completion call: cache lookup, then fixture table or
    /// HTTP backend, then cache write-through.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let profile = self.profile(&request.profile_id)?;
        let counters = &self.counters[&profile.id];

        let overrides = request.params_override.clone().unwrap_or_default();
        let temperature = overrides.temperature.unwrap_or(profile.temperature);
        let max_tokens = overrides.max_tokens.unwrap_or(profile.max_tokens);

        let key = cache_key(
            &profile.model_name,
            &request.prompt,
            request.forced_continuation.as_deref(),
            request.image_ref.as_deref(),
            temperature,
            max_tokens,
        );

        if let Some(mut hit) = self.cache.get(&key) {
            counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            hit.cache_hit = true;
            hit.latency_ms = 0;
            return Ok(hit);
        }

        counters.invocations.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let mut result = match profile.kind {
            BackendKind::Scripted => fixtures::scripted_lookup(&self.fixtures, profile, request)?,
            BackendKind::Http => {
                let backend = self.http.as_ref().expect("http backend initialised");
                let outcome = backend.call(profile, request, temperature, max_tokens)?;
                counters.retries.fetch_add(outcome.retries, Ordering::Relaxed);
                outcome.result
            }
        };
        result.cache_hit = false;
        result.latency_ms = if self.deterministic {
            0
        } else {
            started.elapsed().as_millis() as u64
        };

        self.cache.put(&key, &result)?;
        Ok(result)
    }
}
