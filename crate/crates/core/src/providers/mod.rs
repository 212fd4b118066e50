//! Gateway to every embedding and LLM sub-task the engine delegates.
//!
//! Backends implement [`ProviderBackend`]. Tier code never talks to a backend
//! directly; it goes through [`Provider`], which enforces pre/postconditions
//! and appends one [`RequestRecord`] per call to its request log. A
//! `Provider` is cheap to [`fork`](Provider::fork) so each request or replay
//! run can account for its own calls while sharing one backend.

mod fault;
mod remote;
mod stub;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TraitSchema;
use crate::error::{Error, Result};
use crate::model::{DialoguePage, Embedding, Segment};

pub use fault::FaultInjectingProvider;
pub use remote::{RemoteConfig, RemoteProvider};
pub use stub::{StubProvider, STUB_EMBEDDING_DIM};

/// What a summary is for; remote backends pick a different prompt per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    ChainMeta,
    SegmentSummary,
}

/// A single trait update proposed by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitUpdate {
    pub value: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    1.0
}

/// Facts and trait updates extracted from one segment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersonaUpdates {
    #[serde(default)]
    pub traits: BTreeMap<String, TraitUpdate>,
    #[serde(default)]
    pub user_facts: Vec<String>,
    #[serde(default)]
    pub agent_facts: Vec<String>,
}

/// A concrete embedding/LLM implementation.
///
/// Implementations must be callable concurrently from several sessions.
pub trait ProviderBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Dimension of every vector returned by [`embed`](Self::embed).
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
    fn extract_keywords(&self, text: &str) -> Result<BTreeSet<String>>;
    fn judge_continuity(&self, page_text: &str, chain_meta: &str) -> Result<bool>;
    fn summarize(&self, kind: SummaryKind, texts: &[String]) -> Result<String>;
    fn extract_persona_updates(
        &self,
        segment: &Segment,
        schema: &TraitSchema,
    ) -> Result<PersonaUpdates>;
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Embed,
    ExtractKeywords,
    JudgeContinuity,
    Summarize,
    ExtractPersona,
    Complete,
}

/// One provider call as seen by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub task: TaskKind,
    pub input_digest: String,
    /// Empty when the call failed.
    pub output_digest: String,
    pub latency_ms: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub ok: bool,
}

/// Aggregate counters over a slice of the request log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub calls: u64,
    pub failed_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl ProviderStats {
    pub fn from_records(records: &[RequestRecord]) -> Self {
        records.iter().fold(Self::default(), |mut s, r| {
            s.calls += 1;
            s.failed_calls += u64::from(!r.ok);
            s.input_tokens += r.input_tokens;
            s.output_tokens += r.output_tokens;
            s
        })
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Logging, contract-enforcing front end over a [`ProviderBackend`].
pub struct Provider {
    backend: Arc<dyn ProviderBackend>,
    log: Mutex<Vec<RequestRecord>>,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider")
            .field("backend", &self.backend.name())
            .field("calls", &self.log_len())
            .finish()
    }
}

impl Provider {
    pub fn new(backend: Arc<dyn ProviderBackend>) -> Self {
        Self { backend, log: Mutex::new(Vec::new()) }
    }

    /// Convenience constructor for the deterministic stub at its default dimension.
    pub fn stub() -> Self {
        Self::new(Arc::new(StubProvider::default()))
    }

    /// A new gateway over the same backend with an empty log.
    pub fn fork(&self) -> Self {
        Self::new(Arc::clone(&self.backend))
    }

    pub fn backend(&self) -> &Arc<dyn ProviderBackend> {
        &self.backend
    }

    pub fn dimension(&self) -> usize {
        self.backend.dimension()
    }

    pub fn log_len(&self) -> usize {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Copy of the log from position `from` onward.
    pub fn records_since(&self, from: usize) -> Vec<RequestRecord> {
        let log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn records(&self) -> Vec<RequestRecord> {
        self.records_since(0)
    }

    pub fn stats_since(&self, from: usize) -> ProviderStats {
        ProviderStats::from_records(&self.records_since(from))
    }

    fn record<T>(
        &self,
        task: TaskKind,
        input: &str,
        call: impl FnOnce() -> Result<T>,
        render: impl FnOnce(&T) -> (Vec<u8>, u64),
    ) -> Result<T> {
        let started = Instant::now();
        let result = call();
        let latency_ms = started.elapsed().as_millis() as u64;
        let (output_digest, output_tokens, ok) = match &result {
            Ok(value) => {
                let (bytes, tokens) = render(value);
                (digest(&bytes), tokens, true)
            }
            Err(_) => (String::new(), 0, false),
        };
        let entry = RequestRecord {
            task,
            input_digest: digest(input.as_bytes()),
            output_digest,
            latency_ms,
            input_tokens: word_count(input),
            output_tokens,
            ok,
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
        // Anything a backend reports is surfaced as unavailability.
        result.map_err(|e| match e {
            Error::ProviderUnavailable(_) | Error::InvalidArgument(_) => e,
            other => Error::ProviderUnavailable(other.to_string()),
        })
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        let dim = self.backend.dimension();
        self.record(
            TaskKind::Embed,
            text,
            || {
                let v = self.backend.embed(text)?;
                if v.len() != dim {
                    return Err(Error::ProviderUnavailable(format!(
                        "backend returned {}-dimensional embedding, expected {dim}",
                        v.len()
                    )));
                }
                Ok(v)
            },
            |v| (v.iter().flat_map(|x| x.to_le_bytes()).collect(), 0),
        )
    }

    pub fn extract_keywords(&self, text: &str) -> Result<BTreeSet<String>> {
        self.record(
            TaskKind::ExtractKeywords,
            text,
            || self.backend.extract_keywords(text),
            |set| {
                let joined = set.iter().cloned().collect::<Vec<_>>().join(" ");
                (joined.into_bytes(), set.len() as u64)
            },
        )
    }

    /// Whether `page` continues the chain summarized by `chain_meta`.
    pub fn judge_continuity(&self, page: &DialoguePage, chain_meta: &str) -> Result<bool> {
        let page_text = page.text();
        let input = format!("{page_text}\n{chain_meta}");
        self.record(
            TaskKind::JudgeContinuity,
            &input,
            || self.backend.judge_continuity(&page_text, chain_meta),
            |b| (vec![u8::from(*b)], 1),
        )
    }

    pub fn summarize(&self, kind: SummaryKind, texts: &[String]) -> Result<String> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("summarize needs at least one text".into()));
        }
        let input = texts.join("\n");
        self.record(
            TaskKind::Summarize,
            &input,
            || {
                let s = self.backend.summarize(kind, texts)?;
                if s.trim().is_empty() {
                    return Err(Error::ProviderUnavailable("backend returned empty summary".into()));
                }
                Ok(s)
            },
            |s| (s.as_bytes().to_vec(), word_count(s)),
        )
    }

    /// Trait keys outside `schema` are dropped with a warning.
    pub fn extract_persona_updates(
        &self,
        segment: &Segment,
        schema: &TraitSchema,
    ) -> Result<PersonaUpdates> {
        if segment.pages.is_empty() {
            return Err(Error::InvalidArgument(format!("segment {} has no pages", segment.id)));
        }
        let input = segment.pages.iter().map(DialoguePage::text).collect::<Vec<_>>().join("\n");
        self.record(
            TaskKind::ExtractPersona,
            &input,
            || {
                let mut updates = self.backend.extract_persona_updates(segment, schema)?;
                updates.traits.retain(|key, _| {
                    let known = schema.contains(key);
                    if !known {
                        tracing::warn!(dimension = %key, "dropping trait outside schema");
                    }
                    known
                });
                updates.user_facts.retain(|f| !f.trim().is_empty());
                updates.agent_facts.retain(|f| !f.trim().is_empty());
                Ok(updates)
            },
            |u| {
                let bytes = serde_json::to_vec(u).unwrap_or_default();
                let tokens = u
                    .user_facts
                    .iter()
                    .chain(&u.agent_facts)
                    .map(|f| word_count(f))
                    .sum::<u64>()
                    + u.traits.values().map(|t| word_count(&t.value)).sum::<u64>();
                (bytes, tokens)
            },
        )
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must be non-empty".into()));
        }
        self.record(
            TaskKind::Complete,
            prompt,
            || self.backend.complete(prompt),
            |s| (s.as_bytes().to_vec(), word_count(s)),
        )
    }
}
