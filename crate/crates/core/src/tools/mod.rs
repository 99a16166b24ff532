//! Modular tool interface: a registry of named tools, argument schemas, the
//! retrieval blocklist, and a total `dispatch` that turns every tool call
//! into an [`Observation`].
//!
//! Failures never escape `dispatch` as Rust errors. They are recorded on the
//! observation under the fixed [`ErrorClass`] taxonomy so that curation can
//! count them later.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use url::Url;

use crate::context::{truncate_result, DEFAULT_TRUNCATION_LIMIT};
use crate::error::RegistryError;
use crate::trajectory::{Action, ActionKind, ErrorClass, Observation, ObservationError};

mod builtin;
pub mod http;
pub mod local;
pub mod mock;

pub use builtin::{
    builtin_suite, names, scrape_extract, BackendSet, FileBackend, SandboxBackend, SandboxPool,
    ScrapeBackend, SearchBackend, SearchHit, SearchResponse,
};

pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(120);

/// A tool failure as reported by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolFailure {
    pub class: ErrorClass,
    pub message: String,
    /// Output produced before the failure, if any.
    pub partial: Option<String>,
    /// Latency reported by the backend instead of measured.
    pub latency_ms: Option<u64>,
}

impl ToolFailure {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
            partial: None,
            latency_ms: None,
        }
    }

    pub fn tool(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::ToolError, message)
    }

    pub fn with_partial(mut self, partial: impl Into<String>) -> Self {
        self.partial = Some(partial.into());
        self
    }

    pub fn with_latency(mut self, latency_ms: u64) -> Self {
        self.latency_ms = Some(latency_ms);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BackendOutput {
    pub content: String,
    /// Latency reported by the backend. Mock backends report their fixture
    /// latency so that replays stay byte-identical; live backends leave this
    /// unset and the wall clock is used.
    pub latency_ms: Option<u64>,
}

impl BackendOutput {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            latency_ms: None,
        }
    }

    pub fn reported(content: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            content: content.into(),
            latency_ms: Some(latency_ms),
        }
    }
}

/// Per-call information handed to a tool backend.
#[derive(Debug, Clone)]
pub struct InvokeContext<'a> {
    /// Sandbox namespace of the calling run.
    pub namespace: &'a str,
    pub timeout: Duration,
    pub blocklist: &'a Blocklist,
}

pub trait ToolBackend: Send + Sync {
    fn invoke(&self, args: &Value, ctx: &InvokeContext<'_>) -> Result<BackendOutput, ToolFailure>;
}

impl<F> ToolBackend for F
where
    F: Fn(&Value, &InvokeContext<'_>) -> Result<BackendOutput, ToolFailure> + Send + Sync,
{
    fn invoke(&self, args: &Value, ctx: &InvokeContext<'_>) -> Result<BackendOutput, ToolFailure> {
        self(args, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    /// An absolute http(s) URL. Checked against the blocklist before dispatch.
    Url,
    Integer,
    Boolean,
    Object,
    Array,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub required: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub params: Vec<ParamSpec>,
}

impl ParamSchema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn required(mut self, name: &str, ty: ParamType, description: &str) -> Self {
        self.params.push(ParamSpec {
            name: name.into(),
            ty,
            required: true,
            description: description.into(),
        });
        self
    }

    pub fn optional(mut self, name: &str, ty: ParamType, description: &str) -> Self {
        self.params.push(ParamSpec {
            name: name.into(),
            ty,
            required: false,
            description: description.into(),
        });
        self
    }

    pub fn url_params(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|p| p.ty == ParamType::Url)
            .map(|p| p.name.as_str())
    }

    /// Checks that `args` is an object with every required parameter, no
    /// unknown keys, and values of the declared types.
    pub fn validate(&self, args: &Value) -> Result<(), String> {
        let obj = args
            .as_object()
            .ok_or_else(|| "arguments must be an object".to_string())?;
        for key in obj.keys() {
            if !self.params.iter().any(|p| &p.name == key) {
                return Err(format!("unknown argument `{key}`"));
            }
        }
        for p in &self.params {
            match obj.get(&p.name) {
                None | Some(Value::Null) if p.required => {
                    return Err(format!("missing required argument `{}`", p.name))
                }
                None | Some(Value::Null) => {}
                Some(v) => {
                    let ok = match p.ty {
                        ParamType::String => v.is_string(),
                        ParamType::Url => match v.as_str() {
                            Some(s) => parse_http_url(s).is_ok(),
                            None => false,
                        },
                        ParamType::Integer => v.is_i64() || v.is_u64(),
                        ParamType::Boolean => v.is_boolean(),
                        ParamType::Object => v.is_object(),
                        ParamType::Array => v.is_array(),
                    };
                    if !ok {
                        return Err(format!("argument `{}` is not a valid {:?}", p.name, p.ty));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn parse_http_url(text: &str) -> Result<Url, String> {
    let url = Url::parse(text).map_err(|e| format!("malformed url `{text}`: {e}"))?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
        return Err(format!("malformed url `{text}`: expected an http(s) URL with a host"));
    }
    Ok(url)
}

/// Host suffixes that retrieval tools refuse to touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Blocklist {
    pub domain_patterns: Vec<String>,
}

impl Default for Blocklist {
    fn default() -> Self {
        Self {
            domain_patterns: vec!["huggingface.co".to_string()],
        }
    }
}

impl Blocklist {
    pub fn new<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            domain_patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            domain_patterns: Vec::new(),
        }
    }

    /// Case-insensitive suffix match on the URL host, at label boundaries.
    pub fn blocks_host(&self, host: &str) -> bool {
        let host = host.trim_end_matches('.').to_ascii_lowercase();
        self.domain_patterns.iter().any(|p| {
            let p = p.trim_start_matches('.').to_ascii_lowercase();
            host == p || host.ends_with(&format!(".{p}"))
        })
    }

    pub fn blocks(&self, url: &Url) -> bool {
        url.host_str().is_some_and(|h| self.blocks_host(h))
    }
}

#[derive(Clone)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub param_schema: ParamSchema,
    /// Output is cut with `truncate_result` when set.
    pub truncatable: bool,
    /// Argument sets that must validate against `param_schema`.
    pub examples: Vec<Value>,
    pub backend: Arc<dyn ToolBackend>,
}

impl fmt::Debug for ToolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolSpec")
            .field("name", &self.name)
            .field("truncatable", &self.truncatable)
            .field("param_schema", &self.param_schema)
            .finish_non_exhaustive()
    }
}

impl ToolSpec {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        param_schema: ParamSchema,
        backend: Arc<dyn ToolBackend>,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            param_schema,
            truncatable: false,
            examples: Vec::new(),
            backend,
        }
    }

    pub fn truncatable(mut self, yes: bool) -> Self {
        self.truncatable = yes;
        self
    }

    pub fn with_example(mut self, example: Value) -> Self {
        self.examples.push(example);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchLimits {
    pub timeout: Duration,
    pub truncation_limit: usize,
}

impl Default for DispatchLimits {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TOOL_TIMEOUT,
            truncation_limit: DEFAULT_TRUNCATION_LIMIT,
        }
    }
}

/// Name-indexed tool set. Immutable once built; share it behind an `Arc`.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    specs: BTreeMap<String, ToolSpec>,
    blocklist: Blocklist,
    sandboxes: Option<Arc<SandboxPool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_blocklist(mut self, blocklist: Blocklist) -> Self {
        self.blocklist = blocklist;
        self
    }

    pub fn blocklist(&self) -> &Blocklist {
        &self.blocklist
    }

    pub(crate) fn set_sandboxes(&mut self, pool: Arc<SandboxPool>) {
        self.sandboxes = Some(pool);
    }

    /// Sandbox pool shared by the sandbox tools, when the registry has one.
    pub fn sandboxes(&self) -> Option<&Arc<SandboxPool>> {
        self.sandboxes.as_ref()
    }

    pub fn register(mut self, spec: ToolSpec) -> Result<Self, RegistryError> {
        if self.specs.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateToolName(spec.name));
        }
        self.specs.insert(spec.name.clone(), spec);
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.specs.get(name)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.specs.values()
    }

    /// Releases every sandbox the namespace created.
    pub fn close_namespace(&self, namespace: &str) {
        if let Some(pool) = &self.sandboxes {
            pool.close_namespace(namespace);
        }
    }

    /// Executes one tool call. Every input, valid or not, yields an
    /// observation.
    pub fn dispatch(&self, call: &Action, limits: &DispatchLimits, namespace: &str) -> Observation {
        let started = Instant::now();
        let (mut obs, reported) = self.dispatch_inner(call, limits, namespace);
        obs.latency_ms = reported.unwrap_or_else(|| started.elapsed().as_millis() as u64);
        if reported.is_none() && obs.error.is_none() && started.elapsed() > limits.timeout {
            obs.error = Some(ObservationError {
                class: ErrorClass::Timeout,
                message: format!("tool call exceeded {:?}", limits.timeout),
            });
        }
        obs
    }

    fn dispatch_inner(
        &self,
        call: &Action,
        limits: &DispatchLimits,
        namespace: &str,
    ) -> (Observation, Option<u64>) {
        let fail = |class, msg: String| (Observation::failed(class, msg), Some(0));

        if call.kind != ActionKind::ToolCall {
            return fail(ErrorClass::SchemaViolation, "not a tool call".into());
        }
        let name = call.tool_name.as_deref().unwrap_or_default();
        let Some(spec) = self.specs.get(name) else {
            return fail(ErrorClass::UnknownTool, format!("unknown tool `{name}`"));
        };
        let empty = Value::Object(Default::default());
        let args = call.arguments.as_ref().unwrap_or(&empty);

        for param in spec.param_schema.url_params() {
            if let Some(text) = args.get(param).and_then(Value::as_str) {
                match parse_http_url(text) {
                    Err(msg) => return fail(ErrorClass::SchemaViolation, msg),
                    Ok(url) if self.blocklist.blocks(&url) => {
                        return fail(
                            ErrorClass::BlockedDomain,
                            format!("access to {} is disabled", url.host_str().unwrap_or_default()),
                        )
                    }
                    Ok(_) => {}
                }
            }
        }
        if let Err(msg) = spec.param_schema.validate(args) {
            return fail(ErrorClass::SchemaViolation, msg);
        }

        let ctx = InvokeContext {
            namespace,
            timeout: limits.timeout,
            blocklist: &self.blocklist,
        };
        let post = |text: String| -> (String, bool) {
            if spec.truncatable {
                let t = truncate_result(&text, limits.truncation_limit);
                (t.text, t.truncated)
            } else {
                (text, false)
            }
        };
        match spec.backend.invoke(args, &ctx) {
            Ok(out) => {
                let (content, truncated) = post(out.content);
                (
                    Observation {
                        content,
                        truncated,
                        error: None,
                        latency_ms: 0,
                    },
                    out.latency_ms,
                )
            }
            Err(failure) => {
                let (content, truncated) = post(failure.partial.unwrap_or_default());
                (
                    Observation {
                        content,
                        truncated,
                        error: Some(ObservationError {
                            class: failure.class,
                            message: failure.message,
                        }),
                        latency_ms: 0,
                    },
                    failure.latency_ms,
                )
            }
        }
    }
}
