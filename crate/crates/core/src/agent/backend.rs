//! Model backends: the single generation interface behind thought, action
//! and summary production.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::{Message, DEFAULT_MAX_OUTPUT};
use crate::error::BackendError;
use crate::tools::http::post_json;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: usize,
    /// Forwarded to backends that support seeded sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_output_tokens: DEFAULT_MAX_OUTPUT,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

pub trait ModelBackend: Send + Sync {
    fn generate(&self, messages: &[Message], params: &SamplingParams) -> Result<String, BackendError>;
}

impl<F> ModelBackend for F
where
    F: Fn(&[Message], &SamplingParams) -> Result<String, BackendError> + Send + Sync,
{
    fn generate(&self, messages: &[Message], params: &SamplingParams) -> Result<String, BackendError> {
        self(messages, params)
    }
}

/// Replays a fixed list of assistant outputs.
///
/// The k-th non-summary request gets `turns[k]`; summary requests get
/// `summary`. One instance serves one run.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    pub turns: Vec<String>,
    pub summary: Option<String>,
    cursor: AtomicUsize,
    calls: AtomicUsize,
    summary_calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new<I, S>(turns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            turns: turns.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = Some(summary.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn summary_calls(&self) -> usize {
        self.summary_calls.load(Ordering::SeqCst)
    }
}

impl ModelBackend for ScriptedBackend {
    fn generate(&self, messages: &[Message], _params: &SamplingParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if super::is_summary_request(messages) {
            self.summary_calls.fetch_add(1, Ordering::SeqCst);
            return self
                .summary
                .clone()
                .ok_or_else(|| BackendError::new("script has no summary reply"));
        }
        let k = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.turns
            .get(k)
            .cloned()
            .ok_or_else(|| BackendError::new(format!("script exhausted at turn {}", k + 1)))
    }
}

/// OpenAI-compatible `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    /// Full URL of the chat completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl ModelBackend for HttpChatBackend {
    fn generate(&self, messages: &[Message], params: &SamplingParams) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let reply = post_json(&self.endpoint, &body, self.api_key.as_deref(), self.timeout)
            .map_err(|e| BackendError::new(e.to_string()))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::new("reply has no choices[0].message.content"))
    }
}
