//! Deterministic fixture-driven backends.
//!
//! Fixture files are line-delimited records
//!
//! ```text
//! {"tool": "google_search", "arguments": {"q": "..."}, "response": "...",
//!  "error": {"class": "NetworkException", "message": "..."}, "latency_ms": 12}
//! ```
//!
//! keyed by tool name plus key-sorted arguments (`sandbox_id` excluded, since
//! ids depend on the run namespace). Calls without a fixture get a
//! synthesized response derived only from the arguments.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use super::builtin::names;
use super::{
    BackendOutput, BackendSet, FileBackend, SandboxBackend, ScrapeBackend, SearchBackend,
    SearchHit, SearchResponse, ToolFailure,
};
use crate::error::RecordError;
use crate::trajectory::{canonical_json, ObservationError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub tool: String,
    pub arguments: Value,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ObservationError>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl FixtureRecord {
    fn outcome(&self) -> Result<BackendOutput, ToolFailure> {
        match &self.error {
            None => Ok(BackendOutput::reported(self.response.clone(), self.latency_ms)),
            Some(err) => {
                let f = ToolFailure::new(err.class, err.message.clone()).with_latency(self.latency_ms);
                Err(if self.response.is_empty() {
                    f
                } else {
                    f.with_partial(self.response.clone())
                })
            }
        }
    }
}

fn fixture_key(tool: &str, args: &Value) -> String {
    let mut args = args.clone();
    if let Some(obj) = args.as_object_mut() {
        obj.remove("sandbox_id");
        if let Some(Value::String(u)) = obj.get_mut("url") {
            if let Ok(parsed) = Url::parse(u) {
                *u = parsed.to_string();
            }
        }
    }
    format!("{tool}\u{1f}{}", canonical_json(&args))
}

/// `(tool, canonical arguments) -> response` lookup table.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    records: HashMap<String, FixtureRecord>,
}

impl FixtureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: FixtureRecord) {
        self.records.insert(fixture_key(&record.tool, &record.arguments), record);
    }

    pub fn with(mut self, record: FixtureRecord) -> Self {
        self.insert(record);
        self
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, RecordError> {
        let mut store = Self::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| RecordError::malformed(n + 1, e.to_string()))?;
            store.insert(rec);
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn lookup(&self, tool: &str, args: &Value) -> Option<&FixtureRecord> {
        self.records.get(&fixture_key(tool, args))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Counts backend invocations per tool.
#[derive(Debug, Default)]
pub struct CallLog {
    total: AtomicUsize,
    entries: Mutex<Vec<String>>,
}

impl CallLog {
    fn record(&self, tool: &str) {
        self.total.fetch_add(1, Ordering::SeqCst);
        self.entries.lock().unwrap().push(tool.to_string());
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn count(&self, tool: &str) -> usize {
        self.entries.lock().unwrap().iter().filter(|t| *t == tool).count()
    }
}

fn slug(text: &str) -> String {
    let s: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
    s.chars().take(48).collect()
}

/// In-memory sandbox, file store, search engine and scraper.
#[derive(Debug, Default)]
pub struct MockBackend {
    fixtures: FixtureStore,
    files: Mutex<HashMap<(String, String), String>>,
    pub calls: CallLog,
}

impl MockBackend {
    pub fn new(fixtures: FixtureStore) -> Self {
        Self {
            fixtures,
            files: Mutex::new(HashMap::new()),
            calls: CallLog::default(),
        }
    }

    fn fixture(&self, tool: &str, args: Value) -> Option<Result<BackendOutput, ToolFailure>> {
        self.fixtures.lookup(tool, &args).map(FixtureRecord::outcome)
    }

    /// A [`BackendSet`] whose four capabilities all point at `self`.
    pub fn backend_set(self: &Arc<Self>) -> BackendSet {
        BackendSet {
            sandbox: Some(self.clone()),
            files: Some(self.clone()),
            search: Some(self.clone()),
            scrape: Some(self.clone()),
        }
    }
}

impl SandboxBackend for MockBackend {
    fn create(&self, _sandbox_id: &str) -> Result<(), ToolFailure> {
        self.calls.record(names::CREATE_SANDBOX);
        Ok(())
    }

    fn run_command(&self, sandbox_id: &str, command: &str, _timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::RUN_COMMAND);
        self.fixture(names::RUN_COMMAND, json!({ "command": command }))
            .unwrap_or_else(|| {
                let files = self.files.lock().unwrap();
                let listing = if command.trim() == "ls" {
                    let mut names: Vec<&str> = files
                        .keys()
                        .filter(|(id, _)| id == sandbox_id)
                        .map(|(_, p)| p.as_str())
                        .collect();
                    names.sort_unstable();
                    names.join("\n")
                } else {
                    String::new()
                };
                Ok(BackendOutput::reported(format!("$ {command}\n{listing}"), 0))
            })
    }

    fn run_python(&self, _sandbox_id: &str, code: &str, _timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::RUN_PYTHON_CODE);
        self.fixture(names::RUN_PYTHON_CODE, json!({ "code": code }))
            .unwrap_or_else(|| {
                Ok(BackendOutput::reported(
                    format!("[mock] executed {} line(s) of python", code.lines().count()),
                    0,
                ))
            })
    }

    fn close(&self, sandbox_id: &str) {
        self.files.lock().unwrap().retain(|(id, _), _| id != sandbox_id);
    }
}

impl FileBackend for MockBackend {
    fn upload(&self, sandbox_id: &str, local_path: &str, sandbox_path: &str) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::UPLOAD_TO_SANDBOX);
        let args = json!({ "local_file_path": local_path, "sandbox_file_path": sandbox_path });
        if let Some(out) = self.fixture(names::UPLOAD_TO_SANDBOX, args) {
            return out;
        }
        self.files.lock().unwrap().insert(
            (sandbox_id.to_string(), sandbox_path.to_string()),
            format!("[mock upload of {local_path}]"),
        );
        Ok(BackendOutput::reported(format!("uploaded {local_path} to {sandbox_path}"), 0))
    }

    fn download(&self, sandbox_id: &str, sandbox_path: &str, local_path: &str) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::DOWNLOAD_FROM_SANDBOX);
        let args = json!({ "sandbox_file_path": sandbox_path, "local_file_path": local_path });
        if let Some(out) = self.fixture(names::DOWNLOAD_FROM_SANDBOX, args) {
            return out;
        }
        let files = self.files.lock().unwrap();
        if files.contains_key(&(sandbox_id.to_string(), sandbox_path.to_string())) {
            Ok(BackendOutput::reported(format!("saved {sandbox_path} to {local_path}"), 0))
        } else {
            Err(ToolFailure::tool(format!("no such file in sandbox: {sandbox_path}")))
        }
    }

    fn fetch_url(&self, sandbox_id: &str, url: &Url, sandbox_path: &str, _timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::DOWNLOAD_FROM_INTERNET);
        let args = json!({ "url": url.as_str(), "sandbox_file_path": sandbox_path });
        if let Some(out) = self.fixture(names::DOWNLOAD_FROM_INTERNET, args) {
            return out;
        }
        self.files.lock().unwrap().insert(
            (sandbox_id.to_string(), sandbox_path.to_string()),
            format!("[mock download of {url}]"),
        );
        Ok(BackendOutput::reported(format!("downloaded {url} to {sandbox_path}"), 0))
    }
}

impl SearchBackend for MockBackend {
    fn search(&self, query: &str, num_results: usize, _timeout: Duration) -> Result<SearchResponse, ToolFailure> {
        self.calls.record(names::GOOGLE_SEARCH);
        if let Some(rec) = self.fixtures.lookup(names::GOOGLE_SEARCH, &json!({ "q": query })) {
            let out = rec.outcome()?;
            let hits: Vec<SearchHit> = serde_json::from_str(&out.content)
                .map_err(|e| ToolFailure::tool(format!("search fixture is not a result list: {e}")))?;
            return Ok(SearchResponse {
                hits: hits.into_iter().take(num_results).collect(),
                latency_ms: out.latency_ms,
            });
        }
        let s = slug(query);
        let hits = (1..=num_results.min(3))
            .map(|i| SearchHit {
                title: format!("{query} (result {i})"),
                url: format!("https://search.mock/{s}/{i}"),
                snippet: format!("Synthetic snippet {i} for \"{query}\"."),
            })
            .collect();
        Ok(SearchResponse {
            hits,
            latency_ms: Some(0),
        })
    }
}

impl ScrapeBackend for MockBackend {
    fn extract(&self, url: &Url, goal: &str, _timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        self.calls.record(names::SCRAPE_AND_EXTRACT);
        self.fixture(names::SCRAPE_AND_EXTRACT, json!({ "url": url.as_str(), "info_to_extract": goal }))
            .unwrap_or_else(|| {
                Ok(BackendOutput::reported(
                    format!("[mock] {url} contains no information about: {goal}"),
                    0,
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_ignore_order_and_sandbox_id() {
        let store = FixtureStore::new().with(FixtureRecord {
            tool: "run_command".into(),
            arguments: json!({"command": "ls", "sandbox_id": "a"}),
            response: "x".into(),
            error: None,
            latency_ms: 3,
        });
        assert!(store.lookup("run_command", &json!({"sandbox_id": "b", "command": "ls"})).is_some());
        assert!(store.lookup("run_python_code", &json!({"command": "ls"})).is_none());
    }

    #[test]
    fn url_keys_are_normalized() {
        let store = FixtureStore::new().with(FixtureRecord {
            tool: "scrape_and_extract_info".into(),
            arguments: json!({"url": "https://Example.com", "info_to_extract": "g"}),
            response: "found".into(),
            error: None,
            latency_ms: 0,
        });
        let m = MockBackend::new(store);
        let url = Url::parse("https://example.com/").unwrap();
        assert_eq!(m.extract(&url, "g", Duration::ZERO).unwrap().content, "found");
    }

    #[test]
    fn synthesized_search_is_deterministic() {
        let m = MockBackend::default();
        let a = m.search("rust lang", 10, Duration::ZERO).unwrap();
        let b = m.search("rust lang", 10, Duration::ZERO).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hits.len(), 3);
        assert_eq!(m.calls.count("google_search"), 2);
    }
}
