//! Hierarchical memory for conversational agents.
//!
//! Three tiers, each with its own update policy:
//!
//! - **short-term** ([`stm`]): the last few dialogue pages verbatim, linked
//!   into dialogue chains, FIFO overflow into mid-term memory;
//! - **mid-term** ([`mtm`]): topic segments of pages, assigned by embedding
//!   and keyword similarity, evicted by heat;
//! - **long-term persona** ([`lpm`]): user knowledge, agent traits and user
//!   trait dimensions, fed by hot segments.
//!
//! [`retrieval`] pulls from all three tiers for a query and builds the
//! response prompt. All model work goes through [`providers::Provider`].
//! [`persistence`] stores snapshots, and [`eval`] replays transcripts and
//! scores answers.

pub mod config;
pub mod error;
pub mod eval;
pub mod lpm;
pub mod memory;
pub mod model;
pub mod mtm;
pub mod persistence;
pub mod providers;
pub mod retrieval;
pub mod similarity;
pub mod stm;

pub use config::{validate_config, Config, HeatParams, RawConfig, TraitSchema};
pub use error::{Error, Result};
pub use memory::{UpdateReport, UserMemory};
pub use model::{
    DialoguePage, FactEntry, PersonaStore, RetrievalBundle, Segment, SegmentId, Timestamp,
};
pub use providers::{Provider, ProviderBackend, StubProvider};
