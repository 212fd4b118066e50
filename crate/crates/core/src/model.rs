//! Domain types shared by every memory tier.
//!
//! Everything here is plain data. Policy lives in the tier modules
//! ([`crate::stm`], [`crate::mtm`], [`crate::lpm`]) and the retrieval
//! orchestrator. Field order is the canonical serialization order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch. Always supplied by the caller.
pub type Timestamp = u64;

/// Embedding vector. An empty vector means "not yet computed".
pub type Embedding = Vec<f64>;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Identifier of a dialogue page, unique within one user's memory.
    PageId
);
id_newtype!(
    /// Identifier of a mid-term memory segment.
    SegmentId
);
id_newtype!(
    /// Identifier of a dialogue chain. Equal to the id of the chain's first page.
    ChainId
);

/// Per-user monotone counter handing out page and segment ids.
///
/// Ids are never random so that replaying the same input stream yields the
/// same memory state byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdGenerator {
    next: u64,
}

impl IdGenerator {
    pub fn new() -> Self {
        Self { next: 1 }
    }

    /// Resume after the given value; the next id handed out is `last + 1`.
    pub fn resume_after(last: u64) -> Self {
        Self { next: last + 1 }
    }

    pub fn peek(&self) -> u64 {
        self.next
    }

    fn bump(&mut self) -> u64 {
        if self.next == 0 {
            self.next = 1;
        }
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn next_page(&mut self) -> PageId {
        PageId(self.bump())
    }

    pub fn next_segment(&mut self) -> SegmentId {
        SegmentId(self.bump())
    }
}

/// One query/response exchange plus its dialogue-chain context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialoguePage {
    pub id: PageId,
    pub query: String,
    pub response: String,
    pub timestamp: Timestamp,
    /// Assigned when the page enters short-term memory.
    pub chain_id: Option<ChainId>,
    /// Summary of the chain up to and including this page.
    pub chain_meta: String,
    pub keywords: BTreeSet<String>,
    pub embedding: Embedding,
}

impl DialoguePage {
    /// Build a fresh page with no chain assignment and no keywords/embedding.
    pub fn new(
        ids: &mut IdGenerator,
        query: impl Into<String>,
        response: impl Into<String>,
        timestamp: Timestamp,
    ) -> Result<Self> {
        let query = query.into();
        if query.trim().is_empty() {
            return Err(Error::InvalidArgument("page query must be non-empty".into()));
        }
        Ok(Self {
            id: ids.next_page(),
            query,
            response: response.into(),
            timestamp,
            chain_id: None,
            chain_meta: String::new(),
            keywords: BTreeSet::new(),
            embedding: Vec::new(),
        })
    }

    /// The text used for keyword extraction, embedding and summaries.
    pub fn text(&self) -> String {
        if self.response.is_empty() {
            self.query.clone()
        } else {
            format!("{} {}", self.query, self.response)
        }
    }

    /// True once keywords and embedding have been computed.
    pub fn is_indexed(&self) -> bool {
        !self.embedding.is_empty()
    }
}

/// A topic-coherent group of pages in mid-term memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: SegmentId,
    pub pages: Vec<DialoguePage>,
    pub summary: String,
    pub keywords: BTreeSet<String>,
    /// Embedding of `summary`.
    pub embedding: Embedding,
    /// Number of retrievals that selected at least one page of this segment.
    pub n_visit: u64,
    /// Pages inserted since the last promotion to long-term memory.
    pub l_interaction: u64,
    pub last_access: Timestamp,
}

/// A fact stored in the user knowledge base or the agent trait queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEntry {
    pub text: String,
    pub embedding: Embedding,
    pub source_segment: SegmentId,
    pub created_at: Timestamp,
}

/// Value of one user-trait dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitValue {
    pub value: String,
    pub confidence: f64,
    pub last_updated: Timestamp,
}

/// Capacity-bounded FIFO of facts; pushing past capacity drops the oldest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactQueue {
    capacity: usize,
    entries: VecDeque<FactEntry>,
}

impl FactQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &FactEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    /// Append `entry`, returning whatever fell off the front.
    pub fn push(&mut self, entry: FactEntry) -> Option<FactEntry> {
        self.entries.push_back(entry);
        if self.entries.len() > self.capacity {
            self.entries.pop_front()
        } else {
            None
        }
    }
}

/// Long-term persona memory for one user and the agent talking to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaStore {
    pub user_profile: BTreeMap<String, String>,
    pub user_kb: FactQueue,
    pub user_traits: BTreeMap<String, TraitValue>,
    pub agent_profile: BTreeMap<String, String>,
    pub agent_traits: FactQueue,
}

impl PersonaStore {
    pub fn new(kb_capacity: usize, agent_traits_capacity: usize) -> Self {
        Self {
            user_profile: BTreeMap::new(),
            user_kb: FactQueue::new(kb_capacity),
            user_traits: BTreeMap::new(),
            agent_profile: BTreeMap::new(),
            agent_traits: FactQueue::new(agent_traits_capacity),
        }
    }
}

/// A mid-term page selected by retrieval, with the segment it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPage {
    pub segment_id: SegmentId,
    pub page: DialoguePage,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact: FactEntry,
    pub score: f64,
}

/// Everything retrieved from the three tiers for one query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalBundle {
    /// Oldest first.
    pub stm_pages: Vec<DialoguePage>,
    /// Descending relevance.
    pub mtm_pages: Vec<ScoredPage>,
    pub user_kb_hits: Vec<ScoredFact>,
    pub agent_trait_hits: Vec<ScoredFact>,
    pub user_profile: BTreeMap<String, String>,
    pub user_traits: BTreeMap<String, TraitValue>,
    pub agent_profile: BTreeMap<String, String>,
}

impl RetrievalBundle {
    /// Whitespace token count of all recalled memory text.
    pub fn recalled_tokens(&self) -> usize {
        fn words(s: &str) -> usize {
            s.split_whitespace().count()
        }
        let pages = self
            .stm_pages
            .iter()
            .chain(self.mtm_pages.iter().map(|p| &p.page))
            .map(|p| words(&p.query) + words(&p.response))
            .sum::<usize>();
        let facts = self
            .user_kb_hits
            .iter()
            .chain(&self.agent_trait_hits)
            .map(|h| words(&h.fact.text))
            .sum::<usize>();
        let profiles = self
            .user_profile
            .iter()
            .chain(&self.agent_profile)
            .map(|(k, v)| words(k) + words(v))
            .sum::<usize>();
        let traits = self
            .user_traits
            .iter()
            .map(|(k, v)| words(k) + words(&v.value))
            .sum::<usize>();
        pages + facts + profiles + traits
    }
}
