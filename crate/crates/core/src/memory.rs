//! One user's complete memory and the update cascade that runs after every
//! exchange: STM append, STM→MTM overflow, MTM eviction, MTM→LPM promotion.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::lpm;
use crate::model::{DialoguePage, IdGenerator, PageId, PersonaStore, Segment, SegmentId, Timestamp};
use crate::mtm::MidTermMemory;
use crate::providers::Provider;
use crate::stm::ShortTermMemory;

/// All three tiers for one user plus the id counter they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMemory {
    pub user_id: String,
    pub ids: IdGenerator,
    pub stm: ShortTermMemory,
    pub mtm: MidTermMemory,
    pub persona: PersonaStore,
}

/// What one call to [`UserMemory::ingest`] changed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub page_id: Option<PageId>,
    /// Chain linkage fell back to a single-page chain.
    pub stm_degraded: bool,
    /// Page moved from STM into MTM, and the segment it landed in.
    pub overflowed: Option<(PageId, SegmentId)>,
    /// Segments removed from MTM; callers may archive them.
    pub evicted: Vec<Segment>,
    pub promoted: Vec<SegmentId>,
    /// Promotions whose provider calls failed. Their interaction count was
    /// still reset.
    pub promotion_failures: Vec<SegmentId>,
}

/// Checks whether `user_id` is usable as a directory name.
pub fn is_valid_user_id(user_id: &str) -> bool {
    !user_id.is_empty()
        && user_id.len() <= 128
        && user_id != "."
        && user_id != ".."
        && user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl UserMemory {
    pub fn new(user_id: impl Into<String>, config: &Config) -> Result<Self> {
        let user_id = user_id.into();
        if !is_valid_user_id(&user_id) {
            return Err(Error::InvalidArgument(format!("invalid user id `{user_id}`")));
        }
        Ok(Self {
            user_id,
            ids: IdGenerator::new(),
            stm: ShortTermMemory::new(config.stm_capacity),
            mtm: MidTermMemory::new(config.mtm_segment_capacity),
            persona: PersonaStore::new(config.kb_capacity, config.agent_traits_capacity),
        })
    }

    /// Store a finished exchange and run the full update cascade.
    ///
    /// Runs on a copy and commits only on success: if the STM→MTM transfer
    /// fails the memory is left exactly as it was. Chain-linkage and
    /// promotion failures are absorbed and reported instead.
    pub fn ingest(
        &mut self,
        query: &str,
        response: &str,
        config: &Config,
        provider: &Provider,
        now: Timestamp,
    ) -> Result<UpdateReport> {
        let mut next = self.clone();
        let report = next.ingest_in_place(query, response, config, provider, now)?;
        *self = next;
        Ok(report)
    }

    pub(crate) fn ingest_in_place(
        &mut self,
        query: &str,
        response: &str,
        config: &Config,
        provider: &Provider,
        now: Timestamp,
    ) -> Result<UpdateReport> {
        let mut report = UpdateReport::default();
        let page = DialoguePage::new(&mut self.ids, query, response, now)?;
        report.page_id = Some(page.id);

        let appended = self.stm.append(page, provider)?;
        report.stm_degraded = appended.degraded;

        if let Some(old) = appended.overflow {
            let old_id = old.id;
            let placed = self.mtm.insert_page(
                old,
                config.theta,
                &config.heat_params(),
                provider,
                &mut self.ids,
                now,
            )?;
            report.overflowed = Some((old_id, placed.segment_id));
            report.evicted.extend(placed.evicted);
        }

        self.promote_hot(config, provider, now, &mut report)?;
        Ok(report)
    }

    /// Promote every segment hotter than `heat_tau` that gained pages since
    /// its last promotion, then zero its interaction count.
    fn promote_hot(
        &mut self,
        config: &Config,
        provider: &Provider,
        now: Timestamp,
        report: &mut UpdateReport,
    ) -> Result<()> {
        let hot: Vec<SegmentId> = self
            .mtm
            .hot_segments(config.heat_tau, now, &config.heat_params())?
            .into_iter()
            .filter(|(seg, _)| seg.l_interaction > 0)
            .map(|(seg, _)| seg.id)
            .collect();
        for id in hot {
            let segment = self.mtm.get(id).expect("hot segment exists").clone();
            match lpm::promote(&mut self.persona, &segment, &config.trait_schema, provider, now) {
                Ok(_) => report.promoted.push(id),
                Err(e) if e.is_provider_unavailable() => {
                    tracing::warn!(segment = %id, error = %e, "promotion failed; persona unchanged");
                    report.promotion_failures.push(id);
                }
                Err(e) => return Err(e),
            }
            self.mtm.reset_after_promotion(id)?;
        }
        Ok(())
    }

    /// Latest instant recorded anywhere in memory, or 0 when empty.
    ///
    /// Operations at or after this instant cannot hit a clock regression.
    pub fn latest_timestamp(&self) -> Timestamp {
        let stm = self.stm.iter().map(|p| p.timestamp);
        let mtm = self
            .mtm
            .iter()
            .flat_map(|s| std::iter::once(s.last_access).chain(s.pages.iter().map(|p| p.timestamp)));
        let persona = self
            .persona
            .user_kb
            .iter()
            .chain(self.persona.agent_traits.iter())
            .map(|f| f.created_at)
            .chain(self.persona.user_traits.values().map(|t| t.last_updated));
        stm.chain(mtm).chain(persona).max().unwrap_or(0)
    }

    /// Verify every tier invariant. The error names the violated invariant.
    pub fn check_invariants(&self, config: Option<&Config>) -> Result<()> {
        let corrupt = |(invariant, detail): (&'static str, String)| Error::Corrupt { invariant, detail };
        if !is_valid_user_id(&self.user_id) {
            return Err(Error::Corrupt { invariant: "user_id", detail: self.user_id.clone() });
        }
        self.stm.check().map_err(corrupt)?;
        self.mtm.check(config.map(|c| c.embedding_dim)).map_err(corrupt)?;
        lpm::check(&self.persona, config.map(|c| &c.trait_schema)).map_err(corrupt)?;

        let max_id = self
            .stm
            .iter()
            .map(|p| p.id.0)
            .chain(self.mtm.iter().flat_map(|s| std::iter::once(s.id.0).chain(s.pages.iter().map(|p| p.id.0))))
            .max()
            .unwrap_or(0);
        if max_id >= self.ids.peek() && max_id > 0 {
            return Err(Error::Corrupt {
                invariant: "ids.monotone",
                detail: format!("id {max_id} not below next id {}", self.ids.peek()),
            });
        }
        let stm_ids: std::collections::BTreeSet<_> = self.stm.iter().map(|p| p.id).collect();
        if let Some(p) = self.mtm.iter().flat_map(|s| &s.pages).find(|p| stm_ids.contains(&p.id)) {
            return Err(Error::Corrupt {
                invariant: "page_unique",
                detail: format!("page {} in both STM and MTM", p.id),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, RawConfig};
    use crate::providers::{FaultInjectingProvider, StubProvider};
    use std::sync::Arc;

    fn small_config() -> Config {
        validate_config(RawConfig { stm_capacity: Some(2), ..Default::default() }).unwrap()
    }

    #[test]
    fn user_id_rules() {
        assert!(is_valid_user_id("alice-01_x.y"));
        for bad in ["", ".", "..", "a/b", "a b", "ä"] {
            assert!(!is_valid_user_id(bad), "{bad}");
        }
        assert!(UserMemory::new("../etc", &Config::default()).is_err());
    }

    #[test]
    fn overflow_flows_into_mtm() {
        let config = small_config();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        for i in 0..3 {
            mem.ingest(&format!("topic number {i}"), "fine", &config, &provider, i).unwrap();
        }
        assert_eq!(mem.stm.len(), 2);
        assert_eq!(mem.mtm.page_count(), 1);
        mem.check_invariants(Some(&config)).unwrap();
    }

    #[test]
    fn failed_transfer_rolls_back_everything() {
        let config = small_config();
        let fault = Arc::new(FaultInjectingProvider::new(Arc::new(StubProvider::default()), 0.0, 5));
        let provider = Provider::new(fault.clone());
        let mut mem = UserMemory::new("u", &config).unwrap();
        mem.ingest("alpha", "a", &config, &provider, 1).unwrap();
        mem.ingest("beta", "b", &config, &provider, 2).unwrap();
        let before = mem.clone();
        fault.set_failure_rate(1.0);
        let err = mem.ingest("gamma", "c", &config, &provider, 3).unwrap_err();
        assert!(err.is_provider_unavailable());
        assert_eq!(mem, before);
    }

    #[test]
    fn hot_segment_is_promoted_once() {
        // stm capacity 1 so every new page overflows the previous one; all
        // pages share a topic so they pile into one segment.
        let config = validate_config(RawConfig { stm_capacity: Some(1), ..Default::default() }).unwrap();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        let mut promotions = 0;
        for i in 0..7 {
            let r = mem
                .ingest("garden tomatoes soil compost", "garden tomatoes", &config, &provider, 10)
                .unwrap();
            promotions += r.promoted.len();
            if i == 5 {
                // Six ingests: five pages in MTM; heat = 0 + 5 + 1 = 6 > 5.
                assert_eq!(r.promoted.len(), 1);
            }
        }
        assert_eq!(promotions, 1);
        assert_eq!(mem.mtm.len(), 1);
        let seg = mem.mtm.iter().next().unwrap();
        assert_eq!(seg.l_interaction, 1);
        assert_eq!(mem.persona.user_kb.len(), 5);
    }
}
