//! Short-term memory: a fixed-capacity FIFO of dialogue pages.
//!
//! Each appended page is linked into a dialogue chain. If the provider judges
//! it a continuation of the newest page's chain it joins that chain and gets
//! a freshly summarized chain meta; otherwise it starts a new chain. Pages
//! pushed past capacity leave from the head, one per append, for mid-term
//! memory to absorb.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChainId, DialoguePage};
use crate::providers::{Provider, SummaryKind};

const FALLBACK_META_CHARS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortTermMemory {
    capacity: usize,
    /// Oldest first.
    queue: VecDeque<DialoguePage>,
}

/// Result of a single [`ShortTermMemory::append`].
#[derive(Debug, Clone, PartialEq)]
pub struct AppendOutcome {
    /// The head page evicted to make room, if the queue was full.
    pub overflow: Option<DialoguePage>,
    /// True when chain linkage fell back to a single-page chain because the
    /// provider was unavailable.
    pub degraded: bool,
}

impl ShortTermMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "stm capacity must be at least 1");
        Self { capacity, queue: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &DialoguePage> + ExactSizeIterator {
        self.queue.iter()
    }

    /// Copy of every page, oldest first.
    pub fn all_pages(&self) -> Vec<DialoguePage> {
        self.queue.iter().cloned().collect()
    }

    pub fn newest(&self) -> Option<&DialoguePage> {
        self.queue.back()
    }

    /// Link `page` into a chain, append it, and evict the head if over capacity.
    ///
    /// Provider failures do not fail the append: the page gets a fresh
    /// single-page chain whose meta is its own text, and `degraded` is set.
    pub fn append(&mut self, mut page: DialoguePage, provider: &Provider) -> Result<AppendOutcome> {
        if page.chain_id.is_some() {
            return Err(Error::InvalidArgument(format!(
                "page {} already belongs to chain {:?}",
                page.id, page.chain_id
            )));
        }

        let (chain_id, chain_meta, degraded) = match self.link(&page, provider) {
            Ok((id, meta)) => (id, meta, false),
            Err(e) if e.is_provider_unavailable() => {
                tracing::warn!(page = %page.id, error = %e, "chain linkage degraded to single-page chain");
                let meta: String = page.text().chars().take(FALLBACK_META_CHARS).collect();
                (ChainId(page.id.0), meta, true)
            }
            Err(e) => return Err(e),
        };
        page.chain_id = Some(chain_id);
        page.chain_meta = chain_meta;

        self.queue.push_back(page);
        let overflow =
            if self.queue.len() > self.capacity { self.queue.pop_front() } else { None };
        Ok(AppendOutcome { overflow, degraded })
    }

    fn link(&self, page: &DialoguePage, provider: &Provider) -> Result<(ChainId, String)> {
        if let Some(newest) = self.queue.back() {
            if let Some(chain) = newest.chain_id {
                if provider.judge_continuity(page, &newest.chain_meta)? {
                    let mut texts: Vec<String> = self
                        .queue
                        .iter()
                        .rev()
                        .take_while(|p| p.chain_id == Some(chain))
                        .map(DialoguePage::text)
                        .collect();
                    texts.reverse();
                    texts.push(page.text());
                    let meta = provider.summarize(SummaryKind::ChainMeta, &texts)?;
                    return Ok((chain, meta));
                }
            }
        }
        let meta = provider.summarize(SummaryKind::ChainMeta, &[page.text()])?;
        Ok((ChainId(page.id.0), meta))
    }

    /// Check the invariants a loaded snapshot must satisfy.
    pub(crate) fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.capacity == 0 {
            return Err(("stm.capacity>=1", "capacity is 0".into()));
        }
        if self.queue.len() > self.capacity {
            return Err((
                "stm.len<=capacity",
                format!("{} pages for capacity {}", self.queue.len(), self.capacity),
            ));
        }
        let mut prev = None;
        for p in &self.queue {
            if prev.is_some_and(|id| p.id <= id) {
                return Err(("stm.insertion_order", format!("page {} out of order", p.id)));
            }
            prev = Some(p.id);
            if p.chain_id.is_none() || p.chain_meta.is_empty() {
                return Err(("stm.chain_assigned", format!("page {} has no chain", p.id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IdGenerator;
    use crate::providers::{FaultInjectingProvider, StubProvider};
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn pages(ids: &mut IdGenerator, n: usize) -> Vec<DialoguePage> {
        (0..n)
            .map(|i| DialoguePage::new(ids, format!("question {i}"), format!("answer {i}"), i as u64).unwrap())
            .collect()
    }

    #[test]
    fn seven_pages_fit_eighth_overflows_first() {
        let provider = Provider::stub();
        let mut ids = IdGenerator::new();
        let ps = pages(&mut ids, 8);
        let mut stm = ShortTermMemory::new(7);
        for p in &ps[..7] {
            assert!(stm.append(p.clone(), &provider).unwrap().overflow.is_none());
        }
        assert_eq!(stm.len(), 7);
        let out = stm.append(ps[7].clone(), &provider).unwrap();
        assert_eq!(out.overflow.unwrap().id, ps[0].id);
        let ids_left: Vec<_> = stm.iter().map(|p| p.id).collect();
        let expected: Vec<_> = ps[1..].iter().map(|p| p.id).collect();
        assert_eq!(ids_left, expected);
    }

    #[test]
    fn capacity_one_is_minimal_fifo() {
        let provider = Provider::stub();
        let mut ids = IdGenerator::new();
        let ps = pages(&mut ids, 2);
        let mut stm = ShortTermMemory::new(1);
        assert!(stm.append(ps[0].clone(), &provider).unwrap().overflow.is_none());
        assert_eq!(stm.append(ps[1].clone(), &provider).unwrap().overflow.unwrap().id, ps[0].id);
    }

    #[test]
    fn all_pages_preserves_order() {
        let provider = Provider::stub();
        let mut ids = IdGenerator::new();
        let mut stm = ShortTermMemory::new(7);
        assert!(stm.all_pages().is_empty());
        let ps = pages(&mut ids, 2);
        for p in &ps {
            stm.append(p.clone(), &provider).unwrap();
        }
        let got: Vec<_> = stm.all_pages().iter().map(|p| p.id).collect();
        assert_eq!(got, vec![ps[0].id, ps[1].id]);
    }

    #[test]
    fn related_pages_share_a_chain_and_unrelated_reset() {
        let provider = Provider::stub();
        let mut ids = IdGenerator::new();
        let mut stm = ShortTermMemory::new(7);
        let a = DialoguePage::new(&mut ids, "planting tomatoes garden", "water tomatoes daily.", 1).unwrap();
        let b = DialoguePage::new(&mut ids, "tomatoes garden soil", "compost helps tomatoes.", 2).unwrap();
        let c = DialoguePage::new(&mut ids, "stock market crash", "diversify portfolio.", 3).unwrap();
        stm.append(a.clone(), &provider).unwrap();
        stm.append(b, &provider).unwrap();
        stm.append(c.clone(), &provider).unwrap();
        let chains: Vec<_> = stm.iter().map(|p| p.chain_id.unwrap()).collect();
        assert_eq!(chains[0], ChainId(a.id.0));
        assert_eq!(chains[1], chains[0]);
        assert_eq!(chains[2], ChainId(c.id.0));
        // The joined page's meta summarizes both chain members.
        assert_eq!(stm.iter().nth(1).unwrap().chain_meta, "planting tomatoes garden water tomatoes daily. tomatoes garden soil compost helps tomatoes.");
    }

    #[test]
    fn provider_failure_degrades_to_single_page_chain() {
        let backend = Arc::new(FaultInjectingProvider::new(Arc::new(StubProvider::default()), 1.0, 3));
        let provider = Provider::new(backend);
        let mut ids = IdGenerator::new();
        let mut stm = ShortTermMemory::new(3);
        let p = DialoguePage::new(&mut ids, "hello", "there", 1).unwrap();
        let out = stm.append(p.clone(), &provider).unwrap();
        assert!(out.degraded);
        let stored = stm.newest().unwrap();
        assert_eq!(stored.chain_id, Some(ChainId(p.id.0)));
        assert_eq!(stored.chain_meta, "hello there");
    }

    #[test]
    fn page_with_chain_is_rejected() {
        let provider = Provider::stub();
        let mut ids = IdGenerator::new();
        let mut p = DialoguePage::new(&mut ids, "q", "r", 1).unwrap();
        p.chain_id = Some(ChainId(1));
        assert!(ShortTermMemory::new(2).append(p, &provider).is_err());
    }

    fn vocab() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "garden tomatoes soil", "garden tomatoes water", "stock market shares",
            "stock market bonds", "travel japan tokyo", "travel japan kyoto",
        ])
        .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn fifo_overflow_is_exactly_the_oldest(n in 0usize..=100, cap in 1usize..=10) {
            let provider = Provider::stub();
            let mut ids = IdGenerator::new();
            let ps = pages(&mut ids, n);
            let mut stm = ShortTermMemory::new(cap);
            let mut overflowed = Vec::new();
            for p in &ps {
                if let Some(o) = stm.append(p.clone(), &provider).unwrap().overflow {
                    overflowed.push(o.id);
                }
                prop_assert!(stm.len() <= cap);
            }
            let expected: Vec<_> = ps.iter().take(n.saturating_sub(cap)).map(|p| p.id).collect();
            prop_assert_eq!(overflowed, expected);
        }

        #[test]
        fn chains_are_consecutive_runs(topics in prop::collection::vec(vocab(), 1..40)) {
            let provider = Provider::stub();
            let mut ids = IdGenerator::new();
            let mut stm = ShortTermMemory::new(64);
            for (i, t) in topics.iter().enumerate() {
                let p = DialoguePage::new(&mut ids, t.clone(), "ok", i as u64).unwrap();
                stm.append(p, &provider).unwrap();
            }
            let mut closed = BTreeSet::new();
            let mut current = None;
            for p in stm.iter() {
                let c = p.chain_id.unwrap();
                prop_assert!(!p.chain_meta.is_empty());
                if current != Some(c) {
                    if let Some(prev) = current { closed.insert(prev); }
                    prop_assert!(!closed.contains(&c), "chain {:?} spliced", c);
                    current = Some(c);
                }
            }
        }

        #[test]
        fn stub_chains_are_reproducible(topics in prop::collection::vec(vocab(), 1..20)) {
            let run = || {
                let provider = Provider::stub();
                let mut ids = IdGenerator::new();
                let mut stm = ShortTermMemory::new(5);
                for (i, t) in topics.iter().enumerate() {
                    let p = DialoguePage::new(&mut ids, t.clone(), "ok", i as u64).unwrap();
                    stm.append(p, &provider).unwrap();
                }
                stm
            };
            prop_assert_eq!(run(), run());
        }
    }
}
