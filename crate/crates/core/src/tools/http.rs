//! JSON-over-HTTP clients for the live search and scrape services.
//!
//! Search: `POST {endpoint}` with `{"q", "num"}`; the reply is either
//! `{"results": [{title, url, snippet}]}` or the Serper-style
//! `{"organic": [{title, link, snippet}]}`.
//!
//! Scrape: `POST {endpoint}` with `{"url", "info_to_extract"}`; the reply is
//! `{"content": "..."}`.

use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};
use url::Url;

use super::{BackendOutput, ScrapeBackend, SearchBackend, SearchHit, SearchResponse, ToolFailure};
use crate::trajectory::ErrorClass;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpError {
    Timeout,
    Network(String),
    Status(u16, String),
    Decode(String),
}

impl std::fmt::Display for HttpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Timeout => write!(f, "request timed out"),
            Self::Network(m) => write!(f, "network error: {m}"),
            Self::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            Self::Decode(m) => write!(f, "bad response: {m}"),
        }
    }
}

impl From<HttpError> for ToolFailure {
    fn from(e: HttpError) -> Self {
        let class = match &e {
            HttpError::Timeout => ErrorClass::Timeout,
            HttpError::Network(_) => ErrorClass::NetworkException,
            HttpError::Status(code, _) if *code >= 500 || *code == 429 => ErrorClass::NetworkException,
            HttpError::Status(..) | HttpError::Decode(_) => ErrorClass::ToolError,
        };
        ToolFailure::new(class, e.to_string())
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn classify(err: ureq::Error) -> HttpError {
    match err {
        ureq::Error::Timeout(_) => HttpError::Timeout,
        other => HttpError::Network(other.to_string()),
    }
}

/// POSTs a JSON body and decodes a JSON reply.
pub fn post_json<B: Serialize>(
    endpoint: &str,
    body: &B,
    bearer: Option<&str>,
    timeout: Duration,
) -> Result<Value, HttpError> {
    let mut req = agent(timeout).post(endpoint);
    if let Some(token) = bearer {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = req.send_json(body).map_err(classify)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(HttpError::Status(status, text.chars().take(512).collect()));
    }
    resp.body_mut()
        .read_json::<Value>()
        .map_err(|e| HttpError::Decode(e.to_string()))
}

/// GETs a URL and returns the raw body.
pub fn get_bytes(url: &str, timeout: Duration, max_bytes: u64) -> Result<Vec<u8>, HttpError> {
    let mut resp = agent(timeout).get(url).call().map_err(classify)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(HttpError::Status(status, String::new()));
    }
    resp.body_mut()
        .with_config()
        .limit(max_bytes)
        .read_to_vec()
        .map_err(classify)
}

/// Lightweight reachability probe: any HTTP answer counts as reachable.
pub fn probe(url: &str, timeout: Duration) -> Result<(), HttpError> {
    agent(timeout).get(url).call().map(|_| ()).map_err(classify)
}

#[derive(Debug, Clone)]
pub struct HttpSearch {
    pub endpoint: String,
    pub api_key: Option<String>,
}

fn parse_hits(reply: &Value) -> Result<Vec<SearchHit>, HttpError> {
    let field = |v: &Value, k: &str| v.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    if let Some(items) = reply.get("results").and_then(Value::as_array) {
        return Ok(items
            .iter()
            .map(|v| SearchHit { title: field(v, "title"), url: field(v, "url"), snippet: field(v, "snippet") })
            .collect());
    }
    if let Some(items) = reply.get("organic").and_then(Value::as_array) {
        return Ok(items
            .iter()
            .map(|v| SearchHit { title: field(v, "title"), url: field(v, "link"), snippet: field(v, "snippet") })
            .collect());
    }
    Err(HttpError::Decode("reply has neither `results` nor `organic`".into()))
}

impl SearchBackend for HttpSearch {
    fn search(&self, query: &str, num_results: usize, timeout: Duration) -> Result<SearchResponse, ToolFailure> {
        let reply = post_json(
            &self.endpoint,
            &json!({ "q": query, "num": num_results }),
            self.api_key.as_deref(),
            timeout,
        )?;
        let mut hits = parse_hits(&reply)?;
        hits.truncate(num_results);
        Ok(SearchResponse { hits, latency_ms: None })
    }
}

#[derive(Debug, Clone)]
pub struct HttpScrape {
    pub endpoint: String,
    pub api_key: Option<String>,
}

impl ScrapeBackend for HttpScrape {
    fn extract(&self, url: &Url, goal: &str, timeout: Duration) -> Result<BackendOutput, ToolFailure> {
        let reply = post_json(
            &self.endpoint,
            &json!({ "url": url.as_str(), "info_to_extract": goal }),
            self.api_key.as_deref(),
            timeout,
        )?;
        let content = reply
            .get("content")
            .and_then(Value::as_str)
            .ok_or_else(|| ToolFailure::tool("scrape reply has no `content`"))?;
        Ok(BackendOutput::text(content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_search_reply_shapes_parse() {
        let a = parse_hits(&json!({"results": [{"title": "t", "url": "u", "snippet": "s"}]})).unwrap();
        let b = parse_hits(&json!({"organic": [{"title": "t", "link": "u", "snippet": "s"}]})).unwrap();
        assert_eq!(a, b);
        assert!(parse_hits(&json!({})).is_err());
    }

    #[test]
    fn status_codes_map_to_error_classes() {
        let f: ToolFailure = HttpError::Status(503, String::new()).into();
        assert_eq!(f.class, ErrorClass::NetworkException);
        let f: ToolFailure = HttpError::Status(404, String::new()).into();
        assert_eq!(f.class, ErrorClass::ToolError);
        let f: ToolFailure = HttpError::Timeout.into();
        assert_eq!(f.class, ErrorClass::Timeout);
    }

    #[test]
    fn unreachable_host_is_a_network_exception() {
        let err = post_json("http://127.0.0.1:9/search", &json!({}), None, Duration::from_secs(2)).unwrap_err();
        let f: ToolFailure = err.into();
        assert!(matches!(f.class, ErrorClass::NetworkException | ErrorClass::Timeout));
    }
}
