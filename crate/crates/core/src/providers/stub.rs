//! Deterministic provider for tests and offline replay.
//!
//! Every output is a pure function of the input:
//! - embeddings are hashed bag-of-words (each token adds 1.0 at
//!   `fnv1a(token) mod dim`);
//! - keywords are tokens longer than two characters minus a stopword list,
//!   at most 32, in order of first occurrence;
//! - continuity holds iff the keyword Jaccard similarity is at least 0.2;
//! - summaries are the first sentence of every input, capped at 512 chars;
//! - persona updates echo each page as a user fact and an agent fact;
//! - completions echo the first 64 characters of the prompt.

use std::collections::BTreeSet;

use crate::config::TraitSchema;
use crate::error::Result;
use crate::model::{Embedding, Segment};
use crate::similarity::{jaccard, tokenize};

use super::{PersonaUpdates, ProviderBackend, SummaryKind};

pub const STUB_EMBEDDING_DIM: usize = 256;

const MAX_KEYWORDS: usize = 32;
const CONTINUITY_THRESHOLD: f64 = 0.2;
const SUMMARY_MAX_CHARS: usize = 512;
const ECHO_CHARS: usize = 64;

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "all", "also", "and", "any", "are", "because", "been", "before",
    "being", "between", "both", "but", "can", "could", "did", "does", "doing", "during", "each",
    "few", "for", "from", "had", "has", "have", "her", "here", "hers", "him", "his", "how",
    "into", "its", "just", "may", "might", "more", "most", "must", "nor", "not", "now", "off",
    "once", "only", "other", "our", "ours", "out", "over", "own", "same", "she", "should",
    "some", "such", "than", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "those", "through", "too", "under", "until", "very", "was", "were", "what", "when",
    "where", "which", "while", "who", "whom", "why", "will", "with", "would", "yes", "you",
    "your", "yours",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3))
}

fn keywords(text: &str) -> BTreeSet<String> {
    let mut ordered: Vec<String> = Vec::new();
    for tok in tokenize(text) {
        if tok.chars().count() <= 2 || STOPWORDS.contains(&tok.as_str()) || ordered.contains(&tok) {
            continue;
        }
        ordered.push(tok);
        if ordered.len() == MAX_KEYWORDS {
            break;
        }
    }
    ordered.into_iter().collect()
}

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = chars.peek().map_or(true, |(_, next)| next.is_whitespace());
            if at_boundary {
                return &text[..i + c.len_utf8()];
            }
        }
    }
    text
}

/// Deterministic, dependency-free backend.
#[derive(Debug, Clone)]
pub struct StubProvider {
    dim: usize,
}

impl StubProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new(STUB_EMBEDDING_DIM)
    }
}

impl ProviderBackend for StubProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            v[(fnv1a(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Ok(v)
    }

    fn extract_keywords(&self, text: &str) -> Result<BTreeSet<String>> {
        Ok(keywords(text))
    }

    fn judge_continuity(&self, page_text: &str, chain_meta: &str) -> Result<bool> {
        if chain_meta.trim().is_empty() {
            return Ok(false);
        }
        Ok(jaccard(&keywords(page_text), &keywords(chain_meta)) >= CONTINUITY_THRESHOLD)
    }

    fn summarize(&self, _kind: SummaryKind, texts: &[String]) -> Result<String> {
        let joined = texts
            .iter()
            .map(|t| first_sentence(t))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        if joined.is_empty() {
            return Ok("(empty)".into());
        }
        Ok(joined.chars().take(SUMMARY_MAX_CHARS).collect())
    }

    fn extract_persona_updates(
        &self,
        segment: &Segment,
        _schema: &TraitSchema,
    ) -> Result<PersonaUpdates> {
        Ok(PersonaUpdates {
            traits: Default::default(),
            user_facts: segment.pages.iter().map(|p| format!("user said: {}", p.query)).collect(),
            agent_facts: segment
                .pages
                .iter()
                .map(|p| format!("agent said: {}", p.response))
                .collect(),
        })
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let head: String = prompt.chars().take(ECHO_CHARS).collect();
        Ok(format!("STUB-RESPONSE({head})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_sentence_rules() {
        assert_eq!(first_sentence("A. B."), "A.");
        assert_eq!(first_sentence("no terminator"), "no terminator");
        assert_eq!(first_sentence("v1.2 is out! yay"), "v1.2 is out!");
        assert_eq!(first_sentence("  "), "");
    }

    #[test]
    fn summary_is_truncated_to_512_chars() {
        let stub = StubProvider::default();
        let long = "x".repeat(600);
        let s = stub.summarize(SummaryKind::SegmentSummary, &[long]).unwrap();
        assert_eq!(s.chars().count(), 512);
    }

    #[test]
    fn keywords_capped_at_32_by_first_occurrence() {
        let text = (0..40).map(|i| format!("word{i:02}")).collect::<Vec<_>>().join(" ");
        let kw = keywords(&text);
        assert_eq!(kw.len(), 32);
        assert!(kw.contains("word00") && kw.contains("word31") && !kw.contains("word32"));
    }

    #[test]
    fn echo_uses_first_64_chars() {
        let stub = StubProvider::default();
        let prompt = "p".repeat(100);
        assert_eq!(stub.complete(&prompt).unwrap(), format!("STUB-RESPONSE({})", "p".repeat(64)));
    }

    proptest! {
        #[test]
        fn keyword_extraction_is_idempotent(words in prop::collection::vec("[a-z]{1,8}", 0..50)) {
            let text = words.join(" ");
            let once = keywords(&text);
            let joined = once.iter().cloned().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(keywords(&joined), once);
        }

        #[test]
        fn embedding_is_order_invariant(mut words in prop::collection::vec("[a-z]{1,8}", 1..20)) {
            let stub = StubProvider::default();
            let a = stub.embed(&words.join(" ")).unwrap();
            words.reverse();
            let b = stub.embed(&words.join(" ")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
