//! Request orchestration: Look → Recite → Answer, with a full audit trace.
//!
//! A [`Pipeline`] is built once from a [`PipelineConfig`] (fail-fast: every
//! referenced file must exist and every mandatory role must be bound) and
//! then drives requests through the four stages — look, candidates, recite,
//! answer — recording every prompt and response verbatim into a
//! [`PipelineTrace`]. A stage failure aborts the request but still yields
//! the trace of everything that completed, plus a failure record; there
//! are no partial predictions, because a missing recitation would silently
//! bias the argmax.
//!
//! With scripted backends the entire run is byte-deterministic: wall times
//! are recorded as zero and `created_at` pins to the epoch, so two runs of
//! the same fixtures produce identical trace files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendProfile, Gateway, GatewayOptions, Role};
use crate::perception::{
    generate_description, resolve_candidates, CandidateResolution, InferenceRequest,
    StructuredDescription,
};
use crate::prompts::{Lexicon, PromptPack};
use crate::recite::{recite_all, ReciteDeps, ReciteOutcome, RouterMode};
use crate::verdict::{score_all, select, CandidateVerdict, Prediction, ScoringMode, VerdictDeps};
use crate::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

/// Timestamp recorded when the run must be byte-deterministic.
const EPOCH_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

fn default_concurrency() -> usize {
    4
}

fn default_max_candidates() -> usize {
    8
}

/// The single JSON configuration document. Relative paths are resolved
/// against the config file's directory by [`PipelineConfig::from_file`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// All backend profiles; roles look/recite/answer must each be bound
    /// exactly once, nominate/router/teacher at most once.
    pub profiles: Vec<BackendProfile>,
    /// Scripted-response file; required iff any profile is scripted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures_path: Option<PathBuf>,
    /// Persistent completion cache (JSONL, append-only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    /// Prompt-pack override directory; defaults ship in the binary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<PathBuf>,
    /// Organ lexicon override (one term per line, `->` maps variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ_lexicon: Option<PathBuf>,
    /// Host lexicon override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_lexicon: Option<PathBuf>,
    #[serde(default)]
    pub router_mode: RouterMode,
    #[serde(default)]
    pub scoring_mode: ScoringMode,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
    /// Feeds evaluation sampling only; inference itself is seed-free.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Where the CLI writes trace files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Load a config document, resolving relative paths against the file's
    /// parent directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::file(path, format!("cannot read config: {e}")))?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for slot in [
            &mut self.fixtures_path,
            &mut self.cache_path,
            &mut self.prompt_dir,
            &mut self.organ_lexicon,
            &mut self.host_lexicon,
            &mut self.trace_dir,
        ] {
            if let Some(p) = slot {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
    }
}

/// Find the single profile bound to `role`, if any; two is an error.
fn bind_role(profiles: &[BackendProfile], role: Role) -> Result<Option<String>> {
    let mut found = None;
    for profile in profiles {
        if profile.role == role {
            if found.is_some() {
                return Err(Error::Config(format!(
                    "more than one profile bound to role `{}`",
                    role.as_str()
                )));
            }
            found = Some(profile.id.clone());
        }
    }
    Ok(found)
}

fn require_role(profiles: &[BackendProfile], role: Role) -> Result<String> {
    bind_role(profiles, role)?.ok_or_else(|| {
        Error::Config(format!(
            "no profile bound to mandatory role `{}`",
            role.as_str()
        ))
    })
}

/// A constructed, validated inference engine.
#[derive(Debug)]
pub struct Pipeline {
    gateway: Gateway,
    pack: PromptPack,
    organs: Lexicon,
    hosts: Lexicon,
    pub config: PipelineConfig,
    look_id: String,
    nominate_id: Option<String>,
    router_id: Option<String>,
    recite_id: String,
    answer_id: String,
}

/// One completed stage in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// One of `look`, `candidates`, `recite`, `answer`, in that order.
    pub stage: String,
    /// SHA-256 over the stage's length-prefixed inputs.
    pub inputs_digest: String,
    pub outputs: StageOutputs,
    /// Zero under deterministic (all-scripted) timing.
    pub wall_ms: u64,
    /// Backend invocations this stage triggered (cache hits excluded).
    pub backend_calls: u64,
    /// Degradations that did not fail the stage, e.g. router fallbacks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallbacks: Vec<String>,
}

/// Stage-typed outputs, tagged for the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageOutputs {
    Look {
        description: StructuredDescription,
        prompt: String,
        response: String,
        cache_hit: bool,
    },
    Candidates {
        resolution: CandidateResolution,
    },
    Recite {
        outcome: ReciteOutcome,
    },
    Answer {
        verdicts: Vec<CandidateVerdict>,
    },
}

/// Recorded when a stage aborts the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFailure {
    pub stage: String,
    pub message: String,
}

/// The complete, self-contained audit record of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub trace_version: u32,
    pub request_id: String,
    pub request: InferenceRequest,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<TraceFailure>,
    pub created_at: String,
}

/// Render a trace as pretty JSON with stable field order.
pub fn serialize_trace(trace: &PipelineTrace) -> String {
    let mut text = serde_json::to_string_pretty(trace).expect("traces always serialize");
    text.push('\n');
    text
}

/// Parse a trace document; malformed or wrong-version input fails.
pub fn parse_trace(text: &str) -> Result<PipelineTrace> {
    let trace: PipelineTrace =
        serde_json::from_str(text).map_err(|e| Error::TraceParse(e.to_string()))?;
    if trace.trace_version != TRACE_VERSION {
        return Err(Error::TraceParse(format!(
            "unsupported trace_version {} (expected {TRACE_VERSION})",
            trace.trace_version
        )));
    }
    Ok(trace)
}

/// SHA-256 over length-prefixed parts, so part boundaries are unambiguous.
fn digest_parts<S: AsRef<str>>(parts: &[S]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref().as_bytes();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn total_invocations(gateway: &Gateway) -> u64 {
    gateway.all_stats().values().map(|s| s.invocations).sum()
}

impl Pipeline {
    /// Validate the configuration and construct the engine. Fail-fast:
    /// every referenced file is opened here, never mid-request.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        if config.concurrency_limit == 0 {
            return Err(Error::Config("concurrency_limit must be positive".into()));
        }
        if config.max_candidates < 2 {
            return Err(Error::Config("max_candidates must be at least 2".into()));
        }
        let look_id = require_role(&config.profiles, Role::Look)?;
        let recite_id = require_role(&config.profiles, Role::Recite)?;
        let answer_id = require_role(&config.profiles, Role::Answer)?;
        let nominate_id = bind_role(&config.profiles, Role::Nominate)?;
        let router_id = bind_role(&config.profiles, Role::Router)?;
        if config.router_mode == RouterMode::Model && router_id.is_none() {
            return Err(Error::Config(
                "router_mode is `model` but no router-role profile is bound".into(),
            ));
        }

        let gateway = Gateway::new(
            config.profiles.clone(),
            GatewayOptions {
                fixtures_path: config.fixtures_path.clone(),
                cache_path: config.cache_path.clone(),
                ..GatewayOptions::default()
            },
        )?;
        let pack = match &config.prompt_dir {
            Some(dir) => PromptPack::from_dir(dir)?,
            None => PromptPack::default(),
        };
        let organs = match &config.organ_lexicon {
            Some(path) => Lexicon::from_file(path)?,
            None => Lexicon::default_organs(),
        };
        let hosts = match &config.host_lexicon {
            Some(path) => Lexicon::from_file(path)?,
            None => Lexicon::default_hosts(),
        };
        Ok(Pipeline {
            gateway,
            pack,
            organs,
            hosts,
            config,
            look_id,
            nominate_id,
            router_id,
            recite_id,
            answer_id,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn prompt_pack(&self) -> &PromptPack {
        &self.pack
    }

    fn now(&self) -> String {
        if self.gateway.deterministic_timing() {
            EPOCH_TIMESTAMP.to_string()
        } else {
            chrono::Utc::now()
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }
    }

    fn elapsed_ms(&self, start: Instant) -> u64 {
        if self.gateway.deterministic_timing() {
            0
        } else {
            start.elapsed().as_millis() as u64
        }
    }

    /// Drive one request through all four stages.
    ///
    /// Always returns a trace; the `Result` carries the prediction or the
    /// error that aborted the run (which the trace records as `failure`).
    pub fn run_inference(&self, request: &InferenceRequest) -> (PipelineTrace, Result<Prediction>) {
        let mut trace = PipelineTrace {
            trace_version: TRACE_VERSION,
            request_id: request.request_id.clone(),
            request: request.clone(),
            stages: Vec::with_capacity(4),
            prediction: None,
            failure: None,
            created_at: self.now(),
        };

        macro_rules! stage_try {
            ($stage:expr, $result:expr) => {
                match $result {
                    Ok(value) => value,
                    Err(err) => {
                        trace.failure = Some(TraceFailure {
                            stage: $stage.to_string(),
                            message: err.to_string(),
                        });
                        return (trace, Err(err));
                    }
                }
            };
        }

        stage_try!("request", request.validate());

        // Look: the only stage that ever sees the image.
        let start = Instant::now();
        let before = total_invocations(&self.gateway);
        let (description, look_exchange) = stage_try!(
            "look",
            generate_description(request, &self.look_id, &self.gateway, &self.pack)
        );
        trace.stages.push(StageRecord {
            stage: "look".into(),
            inputs_digest: digest_parts(&[
                request.image_ref.as_str(),
                request.question.as_str(),
            ]),
            outputs: StageOutputs::Look {
                description: description.clone(),
                prompt: look_exchange.prompt,
                response: look_exchange.response,
                cache_hit: look_exchange.cache_hit,
            },
            wall_ms: self.elapsed_ms(start),
            backend_calls: total_invocations(&self.gateway) - before,
            fallbacks: Vec::new(),
        });

        // Candidates: explicit > parsed-from-question > nominated.
        let start = Instant::now();
        let before = total_invocations(&self.gateway);
        let resolution = stage_try!(
            "candidates",
            resolve_candidates(
                request,
                &description,
                self.nominate_id.as_deref(),
                &self.gateway,
                &self.pack,
                self.config.max_candidates,
            )
        );
        trace.stages.push(StageRecord {
            stage: "candidates".into(),
            inputs_digest: digest_parts(&[
                description.raw_text.as_str(),
                request.question.as_str(),
            ]),
            outputs: StageOutputs::Candidates {
                resolution: resolution.clone(),
            },
            wall_ms: self.elapsed_ms(start),
            backend_calls: total_invocations(&self.gateway) - before,
            fallbacks: Vec::new(),
        });
        let candidates = resolution.set;

        // Recite: one neutral query and one recitation per candidate.
        let start = Instant::now();
        let before = total_invocations(&self.gateway);
        let recite_deps = ReciteDeps {
            gateway: &self.gateway,
            recite_profile: &self.recite_id,
            router_profile: self.router_id.as_deref(),
            organs: &self.organs,
            hosts: &self.hosts,
            mode: self.config.router_mode,
            concurrency_limit: self.config.concurrency_limit,
        };
        let recitation = stage_try!(
            "recite",
            recite_all(&description, &candidates, &request.question, &recite_deps)
        );
        let mut recite_inputs: Vec<&str> = vec![&description.raw_text, &request.question];
        recite_inputs.extend(candidates.candidates.iter().map(|c| c.label.as_str()));
        let fallbacks = recitation
            .items
            .iter()
            .filter_map(|item| {
                item.fallback.as_ref().map(|reason| {
                    format!("candidate {}: {reason}", item.knowledge.candidate_index)
                })
            })
            .collect();
        trace.stages.push(StageRecord {
            stage: "recite".into(),
            inputs_digest: digest_parts(&recite_inputs),
            outputs: StageOutputs::Recite {
                outcome: recitation.clone(),
            },
            wall_ms: self.elapsed_ms(start),
            backend_calls: total_invocations(&self.gateway) - before,
            fallbacks,
        });

        // Answer: score every (D, K_i) chain in parallel, then argmax.
        // Inputs are exactly D, C, and the recitations — never the image.
        let start = Instant::now();
        let before = total_invocations(&self.gateway);
        let knowledge: Vec<_> = recitation
            .items
            .iter()
            .map(|item| item.knowledge.clone())
            .collect();
        let verdict_deps = VerdictDeps {
            gateway: &self.gateway,
            answer_profile: &self.answer_id,
            pack: &self.pack,
            mode: self.config.scoring_mode,
            concurrency_limit: self.config.concurrency_limit,
        };
        let verdicts = stage_try!(
            "answer",
            score_all(&description, &candidates, &knowledge, &verdict_deps)
        );
        let mut answer_inputs: Vec<&str> = vec![&description.raw_text];
        answer_inputs.extend(candidates.candidates.iter().map(|c| c.label.as_str()));
        answer_inputs.extend(knowledge.iter().map(|k| k.text.as_str()));
        trace.stages.push(StageRecord {
            stage: "answer".into(),
            inputs_digest: digest_parts(&answer_inputs),
            outputs: StageOutputs::Answer {
                verdicts: verdicts.clone(),
            },
            wall_ms: self.elapsed_ms(start),
            backend_calls: total_invocations(&self.gateway) - before,
            fallbacks: Vec::new(),
        });

        let prediction = stage_try!("answer", select(&candidates, verdicts));
        trace.prediction = Some(prediction.clone());
        (trace, Ok(prediction))
    }
}
