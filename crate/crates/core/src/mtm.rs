//! Mid-term memory: topic segments under a segmented-paging policy.
//!
//! A page overflowing from short-term memory joins the existing segment it
//! scores highest against, provided that score exceeds `theta`; otherwise it
//! opens a new segment. Scores add embedding cosine and keyword Jaccard.
//! When the segment count exceeds capacity the coldest segment is evicted,
//! where
//!
//! ```text
//! heat = alpha * n_visit + beta * l_interaction + gamma * exp(-(now - last_access) / mu)
//! ```
//!
//! Ties on heat go to the oldest `last_access`, then the smallest id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::HeatParams;
use crate::error::{Error, Result};
use crate::model::{DialoguePage, Embedding, IdGenerator, Segment, SegmentId, Timestamp};
use crate::providers::{Provider, SummaryKind};
use crate::similarity::cosine;

pub use crate::similarity::jaccard;

/// Segment-page affinity: `cos(e_s, e_p) + jaccard(K_s, K_p)`, in `[-1, 2]`.
pub fn f_score(page: &DialoguePage, segment: &Segment) -> Result<f64> {
    score_against(&page.keywords, &page.embedding, segment)
}

pub(crate) fn score_against(
    keywords: &BTreeSet<String>,
    embedding: &[f64],
    segment: &Segment,
) -> Result<f64> {
    if embedding.is_empty() || segment.embedding.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "f_score needs populated embeddings (segment {})",
            segment.id
        )));
    }
    Ok(cosine(&segment.embedding, embedding)? + jaccard(&segment.keywords, keywords))
}

/// Heat of `segment` at time `now`.
pub fn heat(segment: &Segment, now: Timestamp, params: &HeatParams) -> Result<f64> {
    if now < segment.last_access {
        return Err(Error::ClockRegression { now, last_access: segment.last_access });
    }
    let elapsed = (now - segment.last_access) as f64;
    let recency = (-elapsed / params.mu).exp();
    Ok(params.alpha * segment.n_visit as f64
        + params.beta * segment.l_interaction as f64
        + params.gamma * recency)
}

/// Eviction order: colder first, then older `last_access`, then smaller id.
fn colder(a: (f64, &Segment), b: (f64, &Segment)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.last_access.cmp(&b.1.last_access))
        .then(a.1.id.cmp(&b.1.id))
}

mod segments_as_vec {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<SegmentId, Segment>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<SegmentId, Segment>, D::Error> {
        let list = Vec::<Segment>::deserialize(d)?;
        let n = list.len();
        let map: BTreeMap<_, _> = list.into_iter().map(|s| (s.id, s)).collect();
        if map.len() != n {
            return Err(serde::de::Error::custom("duplicate segment id"));
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidTermMemory {
    capacity: usize,
    #[serde(with = "segments_as_vec")]
    segments: BTreeMap<SegmentId, Segment>,
}

/// What happened to a page handed to [`MidTermMemory::insert_page`].
#[derive(Debug, Clone, PartialEq)]
pub struct InsertOutcome {
    /// Segment the page now lives in (may equal the evicted one).
    pub segment_id: SegmentId,
    pub created: bool,
    pub evicted: Option<Segment>,
}

impl MidTermMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "mtm capacity must be at least 1");
        Self { capacity, segments: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn page_count(&self) -> usize {
        self.segments.values().map(|s| s.pages.len()).sum()
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        self.segments.get(&id)
    }

    /// Segments in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    /// Insert an already-built segment as-is. Used for restoring state and in tests;
    /// does not evict.
    pub fn insert_segment(&mut self, segment: Segment) -> Result<()> {
        if segment.pages.is_empty() {
            return Err(Error::InvalidArgument(format!("segment {} has no pages", segment.id)));
        }
        if self.segments.contains_key(&segment.id) {
            return Err(Error::InvalidArgument(format!("duplicate segment id {}", segment.id)));
        }
        self.segments.insert(segment.id, segment);
        Ok(())
    }

    /// Place `page` into a segment, evicting the coldest segment on overflow.
    ///
    /// All provider work happens before any mutation, so on error the store
    /// is unchanged.
    pub fn insert_page(
        &mut self,
        mut page: DialoguePage,
        theta: f64,
        params: &HeatParams,
        provider: &Provider,
        ids: &mut IdGenerator,
        now: Timestamp,
    ) -> Result<InsertOutcome> {
        if !page.is_indexed() {
            let text = page.text();
            page.keywords = provider.extract_keywords(&text)?;
            page.embedding = provider.embed(&text)?;
        }

        let mut best: Option<(f64, SegmentId)> = None;
        for seg in self.segments.values() {
            let score = f_score(&page, seg)?;
            if score > theta && best.is_none_or(|(b, _)| score > b) {
                best = Some((score, seg.id));
            }
        }

        let (candidate, created) = match best {
            Some((_, id)) => {
                let mut seg = self.segments[&id].clone();
                seg.pages.push(page);
                seg.l_interaction += 1;
                let texts: Vec<String> = seg.pages.iter().map(DialoguePage::text).collect();
                let (summary, keywords, embedding) = describe(provider, &texts)?;
                seg.summary = summary;
                seg.keywords = keywords;
                seg.embedding = embedding;
                (seg, false)
            }
            None => {
                let (summary, keywords, embedding) = describe(provider, &[page.text()])?;
                let seg = Segment {
                    id: SegmentId(ids.peek()),
                    pages: vec![page],
                    summary,
                    keywords,
                    embedding,
                    n_visit: 0,
                    l_interaction: 1,
                    last_access: now,
                };
                (seg, true)
            }
        };

        let victim = if self.segments.len() + usize::from(created) > self.capacity {
            let mut coldest: Option<(f64, &Segment)> = None;
            let others = self.segments.values().filter(|s| s.id != candidate.id);
            for seg in others.chain(std::iter::once(&candidate)) {
                let h = heat(seg, now, params)?;
                if coldest.is_none_or(|c| colder((h, seg), c) == Ordering::Less) {
                    coldest = Some((h, seg));
                }
            }
            coldest.map(|(_, s)| s.id)
        } else {
            None
        };

        // Commit.
        if created {
            let id = ids.next_segment();
            debug_assert_eq!(id, candidate.id);
        }
        let segment_id = candidate.id;
        self.segments.insert(segment_id, candidate);
        let evicted = victim.and_then(|id| self.segments.remove(&id));
        if let Some(ev) = &evicted {
            tracing::debug!(segment = %ev.id, "evicted coldest segment");
        }
        Ok(InsertOutcome { segment_id, created, evicted })
    }

    /// Record a retrieval hit on `id`.
    pub fn touch(&mut self, id: SegmentId, now: Timestamp) -> Result<()> {
        let seg = self
            .segments
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("segment {id}")))?;
        if now < seg.last_access {
            return Err(Error::ClockRegression { now, last_access: seg.last_access });
        }
        seg.n_visit += 1;
        seg.last_access = now;
        Ok(())
    }

    /// Segments whose heat strictly exceeds `tau`, hottest first (ties by id).
    pub fn hot_segments(
        &self,
        tau: f64,
        now: Timestamp,
        params: &HeatParams,
    ) -> Result<Vec<(&Segment, f64)>> {
        let mut hot = Vec::new();
        for seg in self.segments.values() {
            let h = heat(seg, now, params)?;
            if h > tau {
                hot.push((seg, h));
            }
        }
        hot.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.id.cmp(&b.0.id)));
        Ok(hot)
    }

    /// Every segment with its heat at `now`, next eviction victim first.
    pub fn eviction_order(&self, now: Timestamp, params: &HeatParams) -> Result<Vec<(&Segment, f64)>> {
        let mut all = self
            .segments
            .values()
            .map(|s| Ok((s, heat(s, now, params)?)))
            .collect::<Result<Vec<_>>>()?;
        all.sort_by(|a, b| colder((a.1, a.0), (b.1, b.0)));
        Ok(all)
    }

    /// Zero the interaction count after the segment has been promoted.
    pub fn reset_after_promotion(&mut self, id: SegmentId) -> Result<()> {
        let seg = self
            .segments
            .get_mut(&id)
            .ok_or_else(|| Error::NotFound(format!("segment {id}")))?;
        seg.l_interaction = 0;
        Ok(())
    }

    pub(crate) fn check(&self, dim: Option<usize>) -> std::result::Result<(), (&'static str, String)> {
        if self.capacity == 0 {
            return Err(("mtm.capacity>=1", "capacity is 0".into()));
        }
        if self.segments.len() > self.capacity {
            return Err((
                "mtm.len<=capacity",
                format!("{} segments for capacity {}", self.segments.len(), self.capacity),
            ));
        }
        let mut seen_pages = BTreeSet::new();
        for seg in self.segments.values() {
            if seg.pages.is_empty() {
                return Err(("mtm.segment_non_empty", format!("segment {} has no pages", seg.id)));
            }
            for p in &seg.pages {
                if !seen_pages.insert(p.id) {
                    return Err(("mtm.page_exclusive", format!("page {} in two segments", p.id)));
                }
                if !p.is_indexed() {
                    return Err(("mtm.page_indexed", format!("page {} has no embedding", p.id)));
                }
                if let Some(d) = dim {
                    if p.embedding.len() != d {
                        return Err(("embedding_dim", format!("page {} has dim {}", p.id, p.embedding.len())));
                    }
                }
            }
            if let Some(d) = dim {
                if seg.embedding.len() != d {
                    return Err(("embedding_dim", format!("segment {} has dim {}", seg.id, seg.embedding.len())));
                }
            }
        }
        Ok(())
    }
}

fn describe(provider: &Provider, texts: &[String]) -> Result<(String, BTreeSet<String>, Embedding)> {
    let summary = provider.summarize(SummaryKind::SegmentSummary, texts)?;
    let keywords = provider.extract_keywords(&summary)?;
    let embedding = provider.embed(&summary)?;
    Ok((summary, keywords, embedding))
}
