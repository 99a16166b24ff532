use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use super::{
    parse_http_url, BackendOutput, Blocklist, InvokeContext, ParamSchema, ParamType, ToolBackend,
    ToolFailure, ToolRegistry, ToolSpec,
};
use crate::error::RegistryError;
use crate::trajectory::{ErrorClass, Observation, ObservationError};

/// Wire names of the built-in tools.
pub mod names {
    pub const CREATE_SANDBOX: &str = "create_sandbox";
    pub const RUN_COMMAND: &str = "run_command";
    pub const RUN_PYTHON_CODE: &str = "run_python_code";
    pub const UPLOAD_TO_SANDBOX: &str = "upload_file_from_local_to_sandbox";
    pub const DOWNLOAD_FROM_SANDBOX: &str = "download_file_from_sandbox_to_local";
    pub const DOWNLOAD_FROM_INTERNET: &str = "download_file_from_internet_to_sandbox";
    pub const GOOGLE_SEARCH: &str = "google_search";
    pub const SCRAPE_AND_EXTRACT: &str = "scrape_and_extract_info";

    pub const ALL: [&str; 8] = [
        CREATE_SANDBOX,
        RUN_COMMAND,
        RUN_PYTHON_CODE,
        UPLOAD_TO_SANDBOX,
        DOWNLOAD_FROM_SANDBOX,
        DOWNLOAD_FROM_INTERNET,
        GOOGLE_SEARCH,
        SCRAPE_AND_EXTRACT,
    ];
}

/// Command and code execution inside an isolated workspace.
pub trait SandboxBackend: Send + Sync {
    fn create(&self, sandbox_id: &str) -> Result<(), ToolFailure>;
    fn run_command(&self, sandbox_id: &str, command: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure>;
    fn run_python(&self, sandbox_id: &str, code: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure>;
    fn close(&self, sandbox_id: &str);
}

/// File movement between the sandbox, the local host and the internet.
pub trait FileBackend: Send + Sync {
    fn upload(&self, sandbox_id: &str, local_path: &str, sandbox_path: &str) -> Result<BackendOutput, ToolFailure>;
    fn download(&self, sandbox_id: &str, sandbox_path: &str, local_path: &str) -> Result<BackendOutput, ToolFailure>;
    fn fetch_url(&self, sandbox_id: &str, url: &Url, sandbox_path: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SearchResponse {
    pub hits: Vec<SearchHit>,
    /// See [`BackendOutput::latency_ms`].
    pub latency_ms: Option<u64>,
}

pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, num_results: usize, timeout: Duration) -> Result<SearchResponse, ToolFailure>;
}

/// Fetches a page and condenses it to what `goal` asks for. The condensation
/// model lives behind this interface.
pub trait ScrapeBackend: Send + Sync {
    fn extract(&self, url: &Url, goal: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure>;
}

#[derive(Clone, Default)]
pub struct BackendSet {
    pub sandbox: Option<Arc<dyn SandboxBackend>>,
    pub files: Option<Arc<dyn FileBackend>>,
    pub search: Option<Arc<dyn SearchBackend>>,
    pub scrape: Option<Arc<dyn ScrapeBackend>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxState {
    Created,
    Closed,
}

#[derive(Debug)]
struct Handle {
    namespace: String,
    state: Mutex<SandboxState>,
}

/// Tracks sandbox handles per run namespace and serializes work on each
/// sandbox. Commands only reach the backend for handles in state `Created`.
pub struct SandboxPool {
    backend: Arc<dyn SandboxBackend>,
    handles: Mutex<HashMap<String, Arc<Handle>>>,
    counters: Mutex<HashMap<String, usize>>,
}

impl std::fmt::Debug for SandboxPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxPool").finish_non_exhaustive()
    }
}

impl SandboxPool {
    pub fn new(backend: Arc<dyn SandboxBackend>) -> Self {
        Self {
            backend,
            handles: Mutex::new(HashMap::new()),
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn create(&self, namespace: &str) -> Result<String, ToolFailure> {
        let n = {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(namespace.to_string()).or_insert(0);
            *c += 1;
            *c
        };
        let id = format!("{namespace}-sandbox-{n}");
        self.backend.create(&id)?;
        self.handles.lock().unwrap().insert(
            id.clone(),
            Arc::new(Handle {
                namespace: namespace.to_string(),
                state: Mutex::new(SandboxState::Created),
            }),
        );
        Ok(id)
    }

    pub fn state(&self, sandbox_id: &str) -> Option<SandboxState> {
        let handles = self.handles.lock().unwrap();
        handles.get(sandbox_id).map(|h| *h.state.lock().unwrap())
    }

    /// Runs `f` while holding the sandbox's lock, provided the sandbox exists,
    /// belongs to `namespace` and is open.
    pub fn with_sandbox<T>(
        &self,
        namespace: &str,
        sandbox_id: &str,
        f: impl FnOnce() -> Result<T, ToolFailure>,
    ) -> Result<T, ToolFailure> {
        let handle = self.handles.lock().unwrap().get(sandbox_id).cloned();
        let missing = || {
            ToolFailure::tool(format!(
                "sandbox `{sandbox_id}` does not exist; call {} first",
                names::CREATE_SANDBOX
            ))
        };
        let handle = handle.ok_or_else(missing)?;
        if handle.namespace != namespace {
            return Err(missing());
        }
        let state = handle.state.lock().unwrap();
        if *state == SandboxState::Closed {
            return Err(ToolFailure::tool(format!("sandbox `{sandbox_id}` is closed")));
        }
        f()
    }

    pub fn close(&self, sandbox_id: &str) {
        let handle = self.handles.lock().unwrap().get(sandbox_id).cloned();
        if let Some(h) = handle {
            let mut state = h.state.lock().unwrap();
            if *state == SandboxState::Created {
                *state = SandboxState::Closed;
                self.backend.close(sandbox_id);
            }
        }
    }

    /// Closes and forgets every sandbox of `namespace`; ids restart at 1.
    pub fn close_namespace(&self, namespace: &str) {
        let ids: Vec<String> = self
            .handles
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, h)| h.namespace == namespace)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &ids {
            self.close(id);
        }
        let mut handles = self.handles.lock().unwrap();
        for id in &ids {
            handles.remove(id);
        }
        self.counters.lock().unwrap().remove(namespace);
    }
}

fn str_arg<'a>(args: &'a Value, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn url_arg(args: &Value, key: &str) -> Result<Url, ToolFailure> {
    parse_http_url(str_arg(args, key)).map_err(|m| ToolFailure::new(ErrorClass::SchemaViolation, m))
}

fn bind<F>(f: F) -> Arc<dyn ToolBackend>
where
    F: Fn(&Value, &InvokeContext<'_>) -> Result<BackendOutput, ToolFailure> + Send + Sync + 'static,
{
    Arc::new(f)
}

/// Conditional extraction from a URL, with blocklist and URL checks applied
/// before the backend sees the request.
pub fn scrape_extract(
    url: &str,
    extraction_goal: &str,
    backend: &dyn ScrapeBackend,
    blocklist: &Blocklist,
    timeout: Duration,
) -> Observation {
    let failed = |class, message: String| Observation {
        content: String::new(),
        truncated: false,
        error: Some(ObservationError { class, message }),
        latency_ms: 0,
    };
    let parsed = match parse_http_url(url) {
        Ok(u) => u,
        Err(m) => return failed(ErrorClass::SchemaViolation, m),
    };
    if blocklist.blocks(&parsed) {
        return failed(
            ErrorClass::BlockedDomain,
            format!("access to {} is disabled", parsed.host_str().unwrap_or_default()),
        );
    }
    let started = std::time::Instant::now();
    match backend.extract(&parsed, extraction_goal, timeout) {
        Ok(out) => Observation {
            content: out.content,
            truncated: false,
            error: None,
            latency_ms: out
                .latency_ms
                .unwrap_or_else(|| started.elapsed().as_millis() as u64),
        },
        Err(f) => Observation {
            content: f.partial.unwrap_or_default(),
            truncated: false,
            error: Some(ObservationError {
                class: f.class,
                message: f.message,
            }),
            latency_ms: started.elapsed().as_millis() as u64,
        },
    }
}

/// Builds the registry of the eight built-in tools over `backends`.
pub fn builtin_suite(backends: &BackendSet, blocklist: Blocklist) -> Result<ToolRegistry, RegistryError> {
    let sandbox = backends.sandbox.clone().ok_or(RegistryError::MissingBackend("sandbox"))?;
    let files = backends.files.clone().ok_or(RegistryError::MissingBackend("file"))?;
    let search = backends.search.clone().ok_or(RegistryError::MissingBackend("search"))?;
    let scrape = backends.scrape.clone().ok_or(RegistryError::MissingBackend("scrape"))?;

    let pool = Arc::new(SandboxPool::new(sandbox.clone()));
    let sid = |s: ParamSchema| s.required("sandbox_id", ParamType::String, "id returned by create_sandbox");

    let mut specs = Vec::new();

    let p = pool.clone();
    specs.push(
        ToolSpec::new(
            names::CREATE_SANDBOX,
            "Create an isolated Linux sandbox and return its id.",
            ParamSchema::new(),
            bind(move |_, ctx| {
                let id = p.create(ctx.namespace)?;
                Ok(BackendOutput::reported(json!({ "sandbox_id": id }).to_string(), 0))
            }),
        )
        .with_example(json!({})),
    );

    let (p, sb) = (pool.clone(), sandbox.clone());
    specs.push(
        ToolSpec::new(
            names::RUN_COMMAND,
            "Run a shell command inside a sandbox.",
            sid(ParamSchema::new()).required("command", ParamType::String, "shell command"),
            bind(move |args, ctx| {
                let id = str_arg(args, "sandbox_id");
                p.with_sandbox(ctx.namespace, id, || {
                    sb.run_command(id, str_arg(args, "command"), ctx.timeout)
                })
            }),
        )
        .truncatable(true)
        .with_example(json!({"sandbox_id": "s-1", "command": "ls -la"})),
    );

    let (p, sb) = (pool.clone(), sandbox.clone());
    specs.push(
        ToolSpec::new(
            names::RUN_PYTHON_CODE,
            "Run Python code inside a sandbox.",
            sid(ParamSchema::new()).required("code", ParamType::String, "Python source"),
            bind(move |args, ctx| {
                let id = str_arg(args, "sandbox_id");
                p.with_sandbox(ctx.namespace, id, || {
                    sb.run_python(id, str_arg(args, "code"), ctx.timeout)
                })
            }),
        )
        .truncatable(true)
        .with_example(json!({"sandbox_id": "s-1", "code": "print(1 + 1)"})),
    );

    let (p, fb) = (pool.clone(), files.clone());
    specs.push(
        ToolSpec::new(
            names::UPLOAD_TO_SANDBOX,
            "Copy a local file into a sandbox.",
            sid(ParamSchema::new())
                .required("local_file_path", ParamType::String, "path on the host")
                .required("sandbox_file_path", ParamType::String, "destination inside the sandbox"),
            bind(move |args, ctx| {
                let id = str_arg(args, "sandbox_id");
                p.with_sandbox(ctx.namespace, id, || {
                    fb.upload(id, str_arg(args, "local_file_path"), str_arg(args, "sandbox_file_path"))
                })
            }),
        )
        .with_example(json!({"sandbox_id": "s-1", "local_file_path": "data.csv", "sandbox_file_path": "data.csv"})),
    );

    let (p, fb) = (pool.clone(), files.clone());
    specs.push(
        ToolSpec::new(
            names::DOWNLOAD_FROM_SANDBOX,
            "Copy a file out of a sandbox to the host.",
            sid(ParamSchema::new())
                .required("sandbox_file_path", ParamType::String, "path inside the sandbox")
                .required("local_file_path", ParamType::String, "destination on the host"),
            bind(move |args, ctx| {
                let id = str_arg(args, "sandbox_id");
                p.with_sandbox(ctx.namespace, id, || {
                    fb.download(id, str_arg(args, "sandbox_file_path"), str_arg(args, "local_file_path"))
                })
            }),
        )
        .with_example(json!({"sandbox_id": "s-1", "sandbox_file_path": "out.txt", "local_file_path": "out.txt"})),
    );

    let (p, fb) = (pool.clone(), files);
    specs.push(
        ToolSpec::new(
            names::DOWNLOAD_FROM_INTERNET,
            "Download a URL into a sandbox.",
            sid(ParamSchema::new())
                .required("url", ParamType::Url, "http(s) URL")
                .required("sandbox_file_path", ParamType::String, "destination inside the sandbox"),
            bind(move |args, ctx| {
                let id = str_arg(args, "sandbox_id");
                let url = url_arg(args, "url")?;
                p.with_sandbox(ctx.namespace, id, || {
                    fb.fetch_url(id, &url, str_arg(args, "sandbox_file_path"), ctx.timeout)
                })
            }),
        )
        .with_example(json!({"sandbox_id": "s-1", "url": "https://example.com/a.pdf", "sandbox_file_path": "a.pdf"})),
    );

    specs.push(
        ToolSpec::new(
            names::GOOGLE_SEARCH,
            "Web search. Returns a list of {title, url, snippet}.",
            ParamSchema::new()
                .required("q", ParamType::String, "search query")
                .optional("num", ParamType::Integer, "number of results (default 10)"),
            bind(move |args, ctx| {
                let num = args.get("num").and_then(Value::as_u64).unwrap_or(10) as usize;
                let resp = search.search(str_arg(args, "q"), num, ctx.timeout)?;
                let content = serde_json::to_string(&resp.hits).expect("search hits serialize");
                Ok(BackendOutput {
                    content,
                    latency_ms: resp.latency_ms,
                })
            }),
        )
        .with_example(json!({"q": "tallest building in europe"}))
        .with_example(json!({"q": "rust async", "num": 5})),
    );

    specs.push(
        ToolSpec::new(
            names::SCRAPE_AND_EXTRACT,
            "Fetch a URL and extract the information described by info_to_extract.",
            ParamSchema::new()
                .required("url", ParamType::Url, "page to read")
                .required("info_to_extract", ParamType::String, "what to extract, in plain language"),
            bind(move |args, ctx| {
                let url = url_arg(args, "url")?;
                scrape.extract(&url, str_arg(args, "info_to_extract"), ctx.timeout)
            }),
        )
        .with_example(json!({"url": "https://example.com", "info_to_extract": "the author name"})),
    );

    let mut registry = ToolRegistry::new().with_blocklist(blocklist);
    for spec in specs {
        registry = registry.register(spec)?;
    }
    registry.set_sandboxes(pool);
    Ok(registry)
}
