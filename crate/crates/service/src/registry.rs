//! Per-user sessions: lazy loading, one writer per user, persist-after-mutate.
//!
//! Every method blocks (provider calls, file I/O). Async callers should run
//! them on a blocking thread.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::{SystemTime, UNIX_EPOCH};

use memstrata_core::model::{DialoguePage, PageId, Timestamp};
use memstrata_core::persistence::{self, MemorySnapshot};
use memstrata_core::providers::ProviderStats;
use memstrata_core::retrieval;
use memstrata_core::{Config, Error, Provider, RetrievalBundle, Segment, SegmentId, UpdateReport, UserMemory};
use serde::Serialize;
use serde_json::json;

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid user id `{0}`")]
    InvalidUserId(String),
    #[error("invalid tier `{0}`; expected stm, mtm or lpm")]
    InvalidTier(String),
    #[error(transparent)]
    Engine(#[from] Error),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Stm,
    Mtm,
    Lpm,
}

impl std::str::FromStr for Tier {
    type Err = ServiceError;

    fn from_str(s: &str) -> ServiceResult<Self> {
        match s {
            "stm" => Ok(Tier::Stm),
            "mtm" => Ok(Tier::Mtm),
            "lpm" => Ok(Tier::Lpm),
            other => Err(ServiceError::InvalidTier(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TierCounts {
    pub stm_pages: usize,
    pub mtm_segments: usize,
    pub mtm_pages: usize,
    pub user_kb: usize,
    pub agent_traits: usize,
    pub user_traits: usize,
}

impl TierCounts {
    pub fn of(memory: &UserMemory) -> Self {
        Self {
            stm_pages: memory.stm.len(),
            mtm_segments: memory.mtm.len(),
            mtm_pages: memory.mtm.page_count(),
            user_kb: memory.persona.user_kb.len(),
            agent_traits: memory.persona.agent_traits.len(),
            user_traits: memory.persona.user_traits.len(),
        }
    }
}

/// What one mutation changed, in wire form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateSummary {
    pub page_id: Option<PageId>,
    pub stm_degraded: bool,
    pub overflowed_into: Option<SegmentId>,
    pub evicted: Vec<SegmentId>,
    pub promoted: Vec<SegmentId>,
    pub promotion_failures: Vec<SegmentId>,
}

impl From<&UpdateReport> for UpdateSummary {
    fn from(r: &UpdateReport) -> Self {
        Self {
            page_id: r.page_id,
            stm_degraded: r.stm_degraded,
            overflowed_into: r.overflowed.map(|(_, seg)| seg),
            evicted: r.evicted.iter().map(|s| s.id).collect(),
            promoted: r.promoted.clone(),
            promotion_failures: r.promotion_failures.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BundleSummary {
    pub stm_pages: usize,
    pub mtm_pages: usize,
    pub mtm_segments: Vec<SegmentId>,
    pub user_kb_hits: usize,
    pub agent_trait_hits: usize,
    pub recalled_tokens: usize,
}

impl From<&RetrievalBundle> for BundleSummary {
    fn from(b: &RetrievalBundle) -> Self {
        Self {
            stm_pages: b.stm_pages.len(),
            mtm_pages: b.mtm_pages.len(),
            mtm_segments: retrieval::contributing_segments(b).into_iter().collect(),
            user_kb_hits: b.user_kb_hits.len(),
            agent_trait_hits: b.agent_trait_hits.len(),
            recalled_tokens: b.recalled_tokens(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RespondReply {
    pub user_id: String,
    pub response: String,
    pub timestamp: Timestamp,
    pub counts: TierCounts,
    pub bundle: BundleSummary,
    pub update: UpdateSummary,
    pub stats: ProviderStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReply {
    pub user_id: String,
    pub timestamp: Timestamp,
    pub counts: TierCounts,
    pub update: UpdateSummary,
    pub stats: ProviderStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrieveReply {
    pub user_id: String,
    pub touched: bool,
    pub bundle: RetrievalBundle,
    pub stats: ProviderStats,
}

#[derive(Default)]
struct Slot {
    memory: Option<UserMemory>,
}

pub struct SessionRegistry {
    data_dir: PathBuf,
    config: Config,
    provider: Provider,
    clock: Clock,
    users: Mutex<HashMap<String, Arc<Mutex<Slot>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // State is only replaced wholesale after a successful commit, so a panic
    // while holding the lock cannot leave a half-updated memory behind.
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

impl SessionRegistry {
    pub fn new(data_dir: impl Into<PathBuf>, config: Config, provider: Provider, clock: Clock) -> Self {
        Self { data_dir: data_dir.into(), config, provider, clock, users: Mutex::new(HashMap::new()) }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    fn slot(&self, user_id: &str) -> ServiceResult<Arc<Mutex<Slot>>> {
        if !memstrata_core::memory::is_valid_user_id(user_id) {
            return Err(ServiceError::InvalidUserId(user_id.to_string()));
        }
        Ok(Arc::clone(lock(&self.users).entry(user_id.to_string()).or_default()))
    }

    fn load<'a>(&self, user_id: &str, slot: &'a mut Slot) -> ServiceResult<&'a mut UserMemory> {
        if slot.memory.is_none() {
            let path = persistence::snapshot_path(&self.data_dir, user_id)?;
            let memory = match persistence::load_with(&path, Some(&self.config)) {
                Ok(snapshot) => snapshot.into_memory(),
                Err(Error::NotFound(_)) => UserMemory::new(user_id, &self.config)?,
                Err(e) => return Err(e.into()),
            };
            slot.memory = Some(memory);
        }
        Ok(slot.memory.as_mut().expect("just loaded"))
    }

    /// Pick the operation time. An explicit timestamp must not precede
    /// anything already stored; the wall clock is clamped forward instead.
    fn now_for(&self, memory: &UserMemory, explicit: Option<Timestamp>) -> ServiceResult<Timestamp> {
        let latest = memory.latest_timestamp();
        match explicit {
            Some(t) if t < latest => Err(Error::ClockRegression { now: t, last_access: latest }.into()),
            Some(t) => Ok(t),
            None => Ok((self.clock)().max(latest)),
        }
    }

    /// Archive evicted segments, then atomically replace the snapshot.
    fn persist(&self, next: &UserMemory, evicted: &[Segment], now: Timestamp) -> ServiceResult<()> {
        for seg in evicted {
            persistence::archive_segment(seg, &self.data_dir, &next.user_id)?;
        }
        persistence::save(&MemorySnapshot::capture(next, now), &self.data_dir)?;
        Ok(())
    }

    pub fn respond(&self, user_id: &str, query: &str, timestamp: Option<Timestamp>) -> ServiceResult<RespondReply> {
        let slot = self.slot(user_id)?;
        let mut guard = lock(&slot);
        let memory = self.load(user_id, &mut guard)?;
        let now = self.now_for(memory, timestamp)?;
        let provider = self.provider.fork();

        let mut next = memory.clone();
        let out = retrieval::respond(&mut next, query, &self.config, &provider, now)?;
        self.persist(&next, &out.update.evicted, now)?;
        *memory = next;

        Ok(RespondReply {
            user_id: user_id.to_string(),
            response: out.text,
            timestamp: now,
            counts: TierCounts::of(memory),
            bundle: BundleSummary::from(&out.bundle),
            update: UpdateSummary::from(&out.update),
            stats: provider.stats_since(0),
        })
    }

    /// Store an exchange that already happened elsewhere.
    pub fn ingest(
        &self,
        user_id: &str,
        query: &str,
        response: &str,
        timestamp: Option<Timestamp>,
    ) -> ServiceResult<IngestReply> {
        let slot = self.slot(user_id)?;
        let mut guard = lock(&slot);
        let memory = self.load(user_id, &mut guard)?;
        let now = self.now_for(memory, timestamp)?;
        let provider = self.provider.fork();

        let mut next = memory.clone();
        let update = next.ingest(query, response, &self.config, &provider, now)?;
        self.persist(&next, &update.evicted, now)?;
        *memory = next;

        Ok(IngestReply {
            user_id: user_id.to_string(),
            timestamp: now,
            counts: TierCounts::of(memory),
            update: UpdateSummary::from(&update),
            stats: provider.stats_since(0),
        })
    }

    /// Retrieval only. With `touch` the hit is recorded on the contributing
    /// segments and persisted; without it nothing changes.
    pub fn retrieve(&self, user_id: &str, query: &str, touch: bool) -> ServiceResult<RetrieveReply> {
        let slot = self.slot(user_id)?;
        let mut guard = lock(&slot);
        let memory = self.load(user_id, &mut guard)?;
        let provider = self.provider.fork();

        let bundle = if touch {
            let now = self.now_for(memory, None)?;
            let mut next = memory.clone();
            let bundle = retrieval::retrieve(&mut next, query, &self.config, &provider, now)?;
            if !retrieval::contributing_segments(&bundle).is_empty() {
                self.persist(&next, &[], now)?;
                *memory = next;
            }
            bundle
        } else {
            retrieval::peek(memory, query, &self.config, &provider)?
        };
        Ok(RetrieveReply { user_id: user_id.to_string(), touched: touch, bundle, stats: provider.stats_since(0) })
    }

    /// Read-only dump of one tier. The MTM dump carries each segment's heat
    /// at `now` and lists segments in eviction order.
    pub fn inspect(&self, user_id: &str, tier: Tier, now: Option<Timestamp>) -> ServiceResult<serde_json::Value> {
        let slot = self.slot(user_id)?;
        let mut guard = lock(&slot);
        let memory = self.load(user_id, &mut guard)?;
        let now = now.unwrap_or_else(|| (self.clock)().max(memory.latest_timestamp()));
        Ok(dump_tier(memory, tier, now, &self.config)?)
    }

    /// Drop the user's memory from RAM and disk.
    pub fn wipe(&self, user_id: &str) -> ServiceResult<bool> {
        let slot = self.slot(user_id)?;
        let mut guard = lock(&slot);
        let existed = persistence::wipe(&self.data_dir, user_id)?;
        let was_loaded = guard.memory.take().is_some();
        Ok(existed || was_loaded)
    }

    /// Committed in-memory state, if the user is loaded.
    pub fn snapshot_of(&self, user_id: &str) -> ServiceResult<Option<UserMemory>> {
        let slot = self.slot(user_id)?;
        let guard = lock(&slot);
        Ok(guard.memory.clone())
    }
}

fn page_json(p: &DialoguePage) -> serde_json::Value {
    json!({
        "id": p.id,
        "query": p.query,
        "response": p.response,
        "timestamp": p.timestamp,
        "chain_id": p.chain_id,
        "chain_meta": p.chain_meta,
        "keywords": p.keywords,
    })
}

pub fn dump_tier(memory: &UserMemory, tier: Tier, now: Timestamp, config: &Config) -> memstrata_core::Result<serde_json::Value> {
    Ok(match tier {
        Tier::Stm => json!({
            "tier": "stm",
            "user_id": memory.user_id,
            "capacity": memory.stm.capacity(),
            "pages": memory.stm.iter().map(page_json).collect::<Vec<_>>(),
        }),
        Tier::Mtm => {
            let segments = memory
                .mtm
                .eviction_order(now, &config.heat_params())?
                .into_iter()
                .map(|(s, heat)| {
                    json!({
                        "id": s.id,
                        "heat": heat,
                        "n_visit": s.n_visit,
                        "l_interaction": s.l_interaction,
                        "last_access": s.last_access,
                        "summary": s.summary,
                        "keywords": s.keywords,
                        "pages": s.pages.iter().map(page_json).collect::<Vec<_>>(),
                    })
                })
                .collect::<Vec<_>>();
            json!({
                "tier": "mtm",
                "user_id": memory.user_id,
                "now": now,
                "capacity": memory.mtm.capacity(),
                "segments": segments,
            })
        }
        Tier::Lpm => {
            let facts = |q: &memstrata_core::model::FactQueue| {
                q.iter()
                    .map(|f| json!({"text": f.text, "source_segment": f.source_segment, "created_at": f.created_at}))
                    .collect::<Vec<_>>()
            };
            let p = &memory.persona;
            json!({
                "tier": "lpm",
                "user_id": memory.user_id,
                "user_profile": p.user_profile,
                "user_traits": p.user_traits,
                "user_kb": {"capacity": p.user_kb.capacity(), "entries": facts(&p.user_kb)},
                "agent_profile": p.agent_profile,
                "agent_traits": {"capacity": p.agent_traits.capacity(), "entries": facts(&p.agent_traits)},
            })
        }
    })
}
