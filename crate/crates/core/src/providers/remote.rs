//! OpenAI-compatible HTTP backend.
//!
//! Uses `POST {base_url}/chat/completions` for every text task and
//! `POST {base_url}/embeddings` for vectors. Prompt templates are bundled
//! from `assets/prompts.toml`.

use std::collections::BTreeSet;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::TraitSchema;
use crate::error::{Error, Result};
use crate::model::{DialoguePage, Embedding, Segment};

use super::{PersonaUpdates, ProviderBackend, SummaryKind};

const PROMPTS: &str = include_str!("../../assets/prompts.toml");
const MAX_KEYWORDS: usize = 32;

pub const ENV_BASE_URL: &str = "MEMSTRATA_BASE_URL";
pub const ENV_API_KEY: &str = "MEMSTRATA_API_KEY";
pub const ENV_MODEL: &str = "MEMSTRATA_MODEL";
pub const ENV_EMBEDDING_MODEL: &str = "MEMSTRATA_EMBEDDING_MODEL";
pub const ENV_EMBEDDING_DIM: &str = "MEMSTRATA_EMBEDDING_DIM";
pub const ENV_TIMEOUT_SECS: &str = "MEMSTRATA_TIMEOUT_SECS";

#[derive(Debug, Clone, Deserialize)]
struct Prompts {
    version: u32,
    system: String,
    continuity: String,
    chain_meta: String,
    segment_summary: String,
    keywords: String,
    persona: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub timeout: Duration,
    pub retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, embedding_dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim,
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(250),
        }
    }

    /// Read settings from `MEMSTRATA_*` environment variables.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base_url = var(ENV_BASE_URL).ok_or_else(|| {
            Error::InvalidArgument(format!("{ENV_BASE_URL} must be set for the remote provider"))
        })?;
        let dim = match var(ENV_EMBEDDING_DIM) {
            Some(v) => v.parse().map_err(|_| {
                Error::InvalidArgument(format!("{ENV_EMBEDDING_DIM} is not an integer: {v}"))
            })?,
            None => 1536,
        };
        let mut cfg = Self::new(base_url, var(ENV_MODEL).unwrap_or_else(|| "gpt-4o-mini".into()), dim);
        cfg.api_key = var(ENV_API_KEY);
        if let Some(m) = var(ENV_EMBEDDING_MODEL) {
            cfg.embedding_model = m;
        }
        if let Some(t) = var(ENV_TIMEOUT_SECS) {
            let secs: u64 = t.parse().map_err(|_| {
                Error::InvalidArgument(format!("{ENV_TIMEOUT_SECS} is not an integer: {t}"))
            })?;
            cfg.timeout = Duration::from_secs(secs);
        }
        Ok(cfg)
    }
}

pub struct RemoteProvider {
    config: RemoteConfig,
    client: Client,
    prompts: Prompts,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish()
    }
}

/// Single-pass substitution: `{name}` is replaced, `{{` and `}}` are literal braces.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(close) = tail.find('}') {
                let name = &tail[1..close];
                if let Some((_, value)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(value);
                    rest = &tail[close + 1..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn numbered(texts: &[String]) -> String {
    texts.iter().enumerate().map(|(i, t)| format!("[{}] {t}", i + 1)).collect::<Vec<_>>().join("\n")
}

fn parse_keywords(answer: &str) -> BTreeSet<String> {
    let mut out = Vec::new();
    for kw in answer.split([',', '\n']) {
        let kw = kw.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        if !kw.is_empty() && !out.contains(&kw) {
            out.push(kw);
        }
        if out.len() == MAX_KEYWORDS {
            break;
        }
    }
    out.into_iter().collect()
}

fn parse_persona(answer: &str) -> Result<PersonaUpdates> {
    let start = answer.find('{');
    let end = answer.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if e > s => &answer[s..=e],
        _ => {
            return Err(Error::ProviderUnavailable(
                "persona extraction did not return a JSON object".into(),
            ))
        }
    };
    let mut updates: PersonaUpdates = serde_json::from_str(body)
        .map_err(|e| Error::ProviderUnavailable(format!("malformed persona JSON: {e}")))?;
    for t in updates.traits.values_mut() {
        t.confidence = t.confidence.clamp(0.0, 1.0);
    }
    Ok(updates)
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::ProviderUnavailable(format!("http client: {e}")))?;
        let prompts: Prompts = toml::from_str(PROMPTS).expect("bundled prompts parse");
        tracing::debug!(version = prompts.version, "loaded prompt templates");
        Ok(Self { config, client, prompts })
    }

    pub fn prompt_version(&self) -> u32 {
        self.prompts.version
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<Value>()
                        .map_err(|e| Error::ProviderUnavailable(format!("{url}: bad JSON: {e}")));
                }
                Ok(resp) => {
                    let status = resp.status();
                    last_err = format!("{url}: HTTP {status}");
                    let retryable =
                        status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS;
                    if !retryable {
                        break;
                    }
                }
                Err(e) => last_err = format!("{url}: {e}"),
            }
            tracing::warn!(attempt, error = %last_err, "provider request failed");
        }
        Err(Error::ProviderUnavailable(last_err))
    }

    fn chat(&self, user: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": self.prompts.system},
                {"role": "user", "content": user},
            ],
        });
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::ProviderUnavailable("chat response missing content".into()))
    }
}

impl ProviderBackend for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Ok(vec![0.0; self.config.embedding_dim]);
        }
        let body = json!({"model": self.config.embedding_model, "input": text});
        let resp = self.post("embeddings", &body)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::ProviderUnavailable("embedding response missing data".into()))?;
        values
            .iter()
            .map(|v| {
                v.as_f64().ok_or_else(|| {
                    Error::ProviderUnavailable("embedding contains a non-number".into())
                })
            })
            .collect()
    }

    fn extract_keywords(&self, text: &str) -> Result<BTreeSet<String>> {
        if text.trim().is_empty() {
            return Ok(BTreeSet::new());
        }
        let answer = self.chat(&render(&self.prompts.keywords, &[("text", text)]))?;
        Ok(parse_keywords(&answer))
    }

    fn judge_continuity(&self, page_text: &str, chain_meta: &str) -> Result<bool> {
        if chain_meta.trim().is_empty() {
            return Ok(false);
        }
        let prompt = render(
            &self.prompts.continuity,
            &[("chain_meta", chain_meta), ("page", page_text)],
        );
        let answer = self.chat(&prompt)?;
        Ok(answer.trim_start().to_lowercase().starts_with("yes"))
    }

    fn summarize(&self, kind: SummaryKind, texts: &[String]) -> Result<String> {
        let template = match kind {
            SummaryKind::ChainMeta => &self.prompts.chain_meta,
            SummaryKind::SegmentSummary => &self.prompts.segment_summary,
        };
        self.chat(&render(template, &[("texts", &numbered(texts))]))
    }

    fn extract_persona_updates(
        &self,
        segment: &Segment,
        schema: &TraitSchema,
    ) -> Result<PersonaUpdates> {
        let texts: Vec<String> = segment.pages.iter().map(DialoguePage::text).collect();
        let dims = schema.dimensions().collect::<Vec<_>>().join(", ");
        let prompt = render(
            &self.prompts.persona,
            &[("dimensions", &dims), ("texts", &numbered(&texts))],
        );
        parse_persona(&self.chat(&prompt)?)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.chat(prompt)
    }
}
