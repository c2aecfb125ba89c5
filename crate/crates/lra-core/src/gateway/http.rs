//! OpenAI-compatible HTTP backend.
//!
//! Speaks the `/v1/chat/completions` wire shape: prompt as a user message,
//! optional image attached as an `image_url` content part, and forced
//! continuations sent as an assistant message with `logprobs` + `echo`
//! requested. Rate limits (429), server errors (5xx), and transport
//! failures are retried with exponential backoff and full jitter; all
//! other failures surface immediately.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde_json::{json, Value};

use crate::{Error, Result};

use super::{BackendProfile, CompletionRequest, CompletionResult};

pub(super) struct HttpBackend {
    client: reqwest::blocking::Client,
    max_retries: u32,
    backoff_base_ms: u64,
}

pub(super) struct HttpOutcome {
    pub result: CompletionResult,
    /// Retries spent on this call (0 when the first attempt succeeded).
    pub retries: u64,
}

enum AttemptError {
    /// Worth retrying: 429, 5xx, or a transport-level failure.
    Retryable(String),
    /// Not worth retrying: auth failures, bad requests, unparseable bodies.
    Fatal(Error),
}

impl HttpBackend {
    pub(super) fn new(max_retries: u32, backoff_base_ms: u64, timeout_secs: u64) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            max_retries,
            backoff_base_ms,
        })
    }

    pub(super) fn call(
        &self,
        profile: &BackendProfile,
        request: &CompletionRequest,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<HttpOutcome> {
        let url = format!(
            "{}/v1/chat/completions",
            profile
                .endpoint
                .as_deref()
                .unwrap_or_default()
                .trim_end_matches('/')
        );
        let body = build_body(profile, request, temperature, max_tokens)?;

        let mut retries = 0u64;
        loop {
            match self.attempt(&url, &body, request.forced_continuation.is_some()) {
                Ok(result) => return Ok(HttpOutcome { result, retries }),
                Err(AttemptError::Fatal(err)) => return Err(err),
                Err(AttemptError::Retryable(detail)) => {
                    if retries >= u64::from(self.max_retries) {
                        return Err(Error::Transport {
                            attempts: retries as u32 + 1,
                            detail,
                        });
                    }
                    let ceiling = self.backoff_base_ms.saturating_mul(1 << retries.min(16));
                    let pause = rand::rng().random_range(0..=ceiling);
                    std::thread::sleep(Duration::from_millis(pause));
                    retries += 1;
                }
            }
        }
    }

    fn attempt(
        &self,
        url: &str,
        body: &Value,
        forced: bool,
    ) -> std::result::Result<CompletionResult, AttemptError> {
        let mut builder = self.client.post(url).json(body);
        if let Ok(key) = std::env::var("LRA_API_KEY") {
            if !key.is_empty() {
                builder = builder.bearer_auth(key);
            }
        }
        let response = builder
            .send()
            .map_err(|e| AttemptError::Retryable(format!("transport: {e}")))?;

        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(Error::Transport {
                attempts: 1,
                detail: format!("non-retryable status {status}"),
            }));
        }

        let payload: Value = response.json().map_err(|e| {
            AttemptError::Fatal(Error::MalformedResponse(format!("response body: {e}")))
        })?;
        parse_payload(&payload, forced).map_err(AttemptError::Fatal)
    }
}

fn build_body(
    profile: &BackendProfile,
    request: &CompletionRequest,
    temperature: f64,
    max_tokens: u32,
) -> Result<Value> {
    let user_content = match &request.image_ref {
        Some(image_ref) => json!([
            {"type": "text", "text": request.prompt},
            {"type": "image_url", "image_url": {"url": image_url(image_ref)?}},
        ]),
        None => Value::String(request.prompt.clone()),
    };
    let mut messages = vec![json!({"role": "user", "content": user_content})];
    let mut body = json!({
        "model": profile.model_name,
        "messages": Value::Null,
        "temperature": temperature,
        "max_tokens": max_tokens,
    });
    if let Some(continuation) = &request.forced_continuation {
        messages.push(json!({"role": "assistant", "content": continuation}));
        body["logprobs"] = Value::Bool(true);
        body["echo"] = Value::Bool(true);
    }
    body["messages"] = Value::Array(messages);
    Ok(body)
}

/// Turn an image reference into something the wire format accepts: local
/// files are inlined as data URLs, anything else is forwarded verbatim.
fn image_url(image_ref: &str) -> Result<String> {
    let path = Path::new(image_ref);
    if path.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let mime = match path.extension().and_then(|e| e.to_str()) {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{encoded}"))
    } else {
        Ok(image_ref.to_string())
    }
}

fn parse_payload(payload: &Value, forced: bool) -> Result<CompletionResult> {
    let choice = payload
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::MalformedResponse("no choices in response".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedResponse("choice has no message content".into()))?
        .to_string();

    let token_logprobs = if forced {
        let entries = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| {
                Error::MalformedResponse(
                    "forced continuation returned no token logprobs".into(),
                )
            })?;
        let mut lps = Vec::with_capacity(entries.len());
        for entry in entries {
            let token = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::MalformedResponse("logprob entry missing token".into()))?;
            let logprob = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::MalformedResponse("logprob entry missing logprob".into()))?;
            lps.push((token.to_string(), logprob));
        }
        Some(lps)
    } else {
        None
    };

    Ok(CompletionResult {
        text,
        token_logprobs,
        cache_hit: false,
        latency_ms: 0,
    })
}
