//! Transcript replay and answer scoring.
//!
//! Metric tokenization: lowercase, split on whitespace, drop every
//! non-alphanumeric character inside a token, discard tokens left empty.
//! Scores are therefore not comparable with numbers computed under other
//! tokenizers.
//!
//! Transcript files are JSONL. The first non-blank line is a header, the
//! rest are turns and questions in order:
//!
//! ```text
//! {"schema":"memstrata.transcript","version":1}
//! {"type":"turn","speaker":"alice","text":"I moved to Lisbon.","timestamp":1700000000}
//! {"type":"qa","question":"Where does alice live?","gold_answer":"Lisbon","category":"single_hop"}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::memory::UserMemory;
use crate::model::Timestamp;
use crate::providers::{Provider, ProviderStats};
use crate::retrieval;

pub const TRANSCRIPT_SCHEMA: &str = "memstrata.transcript";
pub const TRANSCRIPT_VERSION: u32 = 1;

pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Matches between the two bags, counting multiplicity.
fn clipped_overlap(pred: &[String], gold: &[String]) -> usize {
    let gold = counts(gold);
    counts(pred)
        .into_iter()
        .map(|(t, n)| n.min(gold.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Token-level F1 between a prediction and a reference answer.
pub fn f1(prediction: &str, gold: &str) -> f64 {
    let pred = metric_tokens(prediction);
    let gold = metric_tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let overlap = clipped_overlap(&pred, &gold) as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / pred.len() as f64;
    let r = overlap / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Unigram BLEU with brevity penalty against a single reference.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let pred = metric_tokens(prediction);
    let gold = metric_tokens(gold);
    if pred.is_empty() {
        return 0.0;
    }
    let precision = clipped_overlap(&pred, &gold) as f64 / pred.len() as f64;
    let (c, r) = (pred.len() as f64, gold.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * precision
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::SingleHop => "single_hop",
            Category::MultiHop => "multi_hop",
            Category::Temporal => "temporal",
            Category::OpenDomain => "open_domain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    pub timestamp: Timestamp,
}

impl Turn {
    /// The page query a turn is stored under.
    pub fn as_query(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub gold_answer: String,
    pub category: Category,
    /// When the question is asked. Defaults to the last turn's timestamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<Timestamp>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub turns: Vec<Turn>,
    pub qa_items: Vec<QaItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Turn { speaker: String, text: String, timestamp: Timestamp },
    Qa {
        question: String,
        gold_answer: String,
        category: Category,
        #[serde(default)]
        timestamp: Option<Timestamp>,
    },
}

impl Transcript {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("transcript {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text, path)
    }

    /// Parse JSONL text. `origin` only labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, column: usize, message: String| Error::Parse {
            path: PathBuf::from(origin),
            line,
            column,
            message,
        };
        let mut transcript = Transcript::default();
        let mut header_seen = false;
        let mut last_ts: Option<Timestamp> = None;

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            if !header_seen {
                let h: Header =
                    serde_json::from_str(raw).map_err(|e| err(lineno, e.column(), format!("bad header: {e}")))?;
                if h.schema != TRANSCRIPT_SCHEMA {
                    return Err(err(lineno, 1, format!("unknown schema `{}`", h.schema)));
                }
                if h.version != TRANSCRIPT_VERSION {
                    return Err(Error::UnsupportedVersion { found: h.version, supported: &[TRANSCRIPT_VERSION] });
                }
                header_seen = true;
                continue;
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| err(lineno, e.column(), e.to_string()))?;
            match line {
                Line::Turn { speaker, text, timestamp } => {
                    if speaker.trim().is_empty() || text.trim().is_empty() {
                        return Err(err(lineno, 1, "turn speaker and text must be non-empty".into()));
                    }
                    if last_ts.is_some_and(|t| timestamp < t) {
                        return Err(err(lineno, 1, format!("timestamp {timestamp} goes backwards")));
                    }
                    last_ts = Some(timestamp);
                    transcript.turns.push(Turn { speaker, text, timestamp });
                }
                Line::Qa { question, gold_answer, category, timestamp } => {
                    if question.trim().is_empty() {
                        return Err(err(lineno, 1, "question must be non-empty".into()));
                    }
                    if let (Some(q), Some(t)) = (timestamp, last_ts) {
                        if q < t {
                            return Err(err(lineno, 1, format!("question timestamp {q} precedes the last turn")));
                        }
                    }
                    transcript.qa_items.push(QaItem { question, gold_answer, category, timestamp });
                }
            }
        }
        if !header_seen && !text.trim().is_empty() {
            return Err(err(1, 1, "missing header".into()));
        }
        Ok(transcript)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({"schema": TRANSCRIPT_SCHEMA, "version": TRANSCRIPT_VERSION}).to_string();
        out.push('\n');
        for t in &self.turns {
            let v = serde_json::json!({"type": "turn", "speaker": t.speaker, "text": t.text, "timestamp": t.timestamp});
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for q in &self.qa_items {
            let mut v = serde_json::to_value(q).expect("qa serializes");
            v["type"] = "qa".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    fn last_timestamp(&self) -> Timestamp {
        self.turns.last().map_or(0, |t| t.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question: String,
    pub gold_answer: String,
    pub category: Category,
    pub response: String,
    pub f1: f64,
    pub bleu1: f64,
    /// Words of stored memory placed in the prompt.
    pub recalled_tokens: usize,
    pub provider_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub count: usize,
    pub f1: f64,
    pub bleu1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub turns_ingested: usize,
    pub questions: usize,
    pub answers: Vec<AnswerRecord>,
    pub by_category: BTreeMap<Category, CategoryScore>,
    pub mean_f1: f64,
    pub mean_bleu1: f64,
    pub mean_recalled_tokens: f64,
    pub avg_calls_per_respond: f64,
    pub ingest: ProviderStats,
    pub respond: ProviderStats,
    /// Every provider request made during the replay.
    pub total: ProviderStats,
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub memory: UserMemory,
    pub report: ReplayReport,
}

/// What a replay step just did, passed to the observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayStep {
    Turn(usize),
    Answer(usize),
}

/// Replay with no observer.
pub fn replay(transcript: &Transcript, user_id: &str, config: &Config, provider: &Provider) -> Result<ReplayOutcome> {
    replay_with(transcript, user_id, config, provider, |_, _| Ok(()))
}

/// Ingest every turn, then answer every question with [`retrieval::respond`].
///
/// `observer` runs after each committed step; returning an error aborts the replay.
pub fn replay_with<F>(
    transcript: &Transcript,
    user_id: &str,
    config: &Config,
    provider: &Provider,
    mut observer: F,
) -> Result<ReplayOutcome>
where
    F: FnMut(&UserMemory, ReplayStep) -> Result<()>,
{
    let provider = provider.fork();
    let mut memory = UserMemory::new(user_id, config)?;

    for (i, turn) in transcript.turns.iter().enumerate() {
        memory.ingest(&turn.as_query(), "", config, &provider, turn.timestamp)?;
        observer(&memory, ReplayStep::Turn(i))?;
    }
    let ingest = provider.stats_since(0);
    let ingest_end = provider.log_len();

    let ask_default = transcript.last_timestamp();
    let mut answers = Vec::with_capacity(transcript.qa_items.len());
    for (i, qa) in transcript.qa_items.iter().enumerate() {
        let from = provider.log_len();
        let now = qa.timestamp.unwrap_or(ask_default);
        let out = retrieval::respond(&mut memory, &qa.question, config, &provider, now)?;
        let stats = provider.stats_since(from);
        answers.push(AnswerRecord {
            question: qa.question.clone(),
            gold_answer: qa.gold_answer.clone(),
            category: qa.category,
            f1: f1(&out.text, &qa.gold_answer),
            bleu1: bleu1(&out.text, &qa.gold_answer),
            response: out.text,
            recalled_tokens: out.bundle.recalled_tokens(),
            provider_calls: stats.calls,
            input_tokens: stats.input_tokens,
            output_tokens: stats.output_tokens,
        });
        observer(&memory, ReplayStep::Answer(i))?;
    }

    let report = summarize_report(
        transcript.turns.len(),
        answers,
        ingest,
        provider.stats_since(ingest_end),
        provider.stats_since(0),
    );
    Ok(ReplayOutcome { memory, report })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize_report(
    turns: usize,
    answers: Vec<AnswerRecord>,
    ingest: ProviderStats,
    respond: ProviderStats,
    total: ProviderStats,
) -> ReplayReport {
    let mut by_category: BTreeMap<Category, CategoryScore> = BTreeMap::new();
    for a in &answers {
        let e = by_category.entry(a.category).or_default();
        e.count += 1;
        e.f1 += a.f1;
        e.bleu1 += a.bleu1;
    }
    for e in by_category.values_mut() {
        e.f1 /= e.count as f64;
        e.bleu1 /= e.count as f64;
    }
    let avg_calls_per_respond = if answers.is_empty() {
        0.0
    } else {
        respond.calls as f64 / answers.len() as f64
    };
    ReplayReport {
        turns_ingested: turns,
        questions: answers.len(),
        mean_f1: mean(answers.iter().map(|a| a.f1)),
        mean_bleu1: mean(answers.iter().map(|a| a.bleu1)),
        mean_recalled_tokens: mean(answers.iter().map(|a| a.recalled_tokens as f64)),
        avg_calls_per_respond,
        by_category,
        answers,
        ingest,
        respond,
        total,
    }
}
