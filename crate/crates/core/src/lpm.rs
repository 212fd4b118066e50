//! Long-term persona memory: promotion of hot segments and persona lookup.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::config::TraitSchema;
use crate::error::{Error, Result};
use crate::model::{FactEntry, FactQueue, PersonaStore, ScoredFact, Segment, Timestamp, TraitValue};
use crate::providers::Provider;
use crate::similarity::cosine;

/// Counts of what a promotion changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromotionOutcome {
    pub user_facts_added: usize,
    pub agent_facts_added: usize,
    pub traits_updated: usize,
    /// Facts pushed out of the front of either queue.
    pub facts_dropped: usize,
}

/// Fold a hot segment into the persona store.
///
/// Facts are appended to the user KB and agent trait queues (oldest dropped
/// once full); trait updates overwrite per dimension. Every provider call
/// runs before the store is touched, so a failure leaves it unchanged.
pub fn promote(
    persona: &mut PersonaStore,
    segment: &Segment,
    schema: &TraitSchema,
    provider: &Provider,
    now: Timestamp,
) -> Result<PromotionOutcome> {
    if segment.pages.is_empty() {
        return Err(Error::InvalidArgument(format!("segment {} has no pages", segment.id)));
    }
    let updates = provider.extract_persona_updates(segment, schema)?;

    let to_entries = |facts: Vec<String>| -> Result<Vec<FactEntry>> {
        facts
            .into_iter()
            .map(|text| {
                let embedding = provider.embed(&text)?;
                Ok(FactEntry { text, embedding, source_segment: segment.id, created_at: now })
            })
            .collect()
    };
    let user_entries = to_entries(updates.user_facts)?;
    let agent_entries = to_entries(updates.agent_facts)?;

    let mut outcome = PromotionOutcome {
        user_facts_added: user_entries.len(),
        agent_facts_added: agent_entries.len(),
        ..Default::default()
    };
    for e in user_entries {
        outcome.facts_dropped += usize::from(persona.user_kb.push(e).is_some());
    }
    for e in agent_entries {
        outcome.facts_dropped += usize::from(persona.agent_traits.push(e).is_some());
    }
    for (dimension, update) in updates.traits {
        if !schema.contains(&dimension) {
            continue;
        }
        persona.user_traits.insert(
            dimension,
            TraitValue {
                value: update.value,
                confidence: update.confidence.clamp(0.0, 1.0),
                last_updated: now,
            },
        );
        outcome.traits_updated += 1;
    }
    Ok(outcome)
}

/// Read-only persona lookup for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonaHits {
    pub user_kb_hits: Vec<ScoredFact>,
    pub agent_trait_hits: Vec<ScoredFact>,
    pub user_profile: BTreeMap<String, String>,
    pub user_traits: BTreeMap<String, TraitValue>,
    pub agent_profile: BTreeMap<String, String>,
}

/// The `top_n` most similar facts, descending; ties go to the newer entry.
fn top_facts(queue: &FactQueue, query: &[f64], top_n: usize) -> Result<Vec<ScoredFact>> {
    let mut scored = queue
        .iter()
        .enumerate()
        .map(|(pos, f)| Ok((cosine(&f.embedding, query)?, pos, f)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.2.created_at.cmp(&a.2.created_at))
            .then(b.1.cmp(&a.1))
    });
    Ok(scored
        .into_iter()
        .take(top_n)
        .map(|(score, _, f)| ScoredFact { fact: f.clone(), score })
        .collect())
}

pub fn retrieve_persona(
    persona: &PersonaStore,
    query_embedding: &[f64],
    top_n: usize,
) -> Result<PersonaHits> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    Ok(PersonaHits {
        user_kb_hits: top_facts(&persona.user_kb, query_embedding, top_n)?,
        agent_trait_hits: top_facts(&persona.agent_traits, query_embedding, top_n)?,
        user_profile: persona.user_profile.clone(),
        user_traits: persona.user_traits.clone(),
        agent_profile: persona.agent_profile.clone(),
    })
}

pub(crate) fn check(
    persona: &PersonaStore,
    schema: Option<&TraitSchema>,
) -> std::result::Result<(), (&'static str, String)> {
    for (name, q) in [("user_kb", &persona.user_kb), ("agent_traits", &persona.agent_traits)] {
        if q.capacity() == 0 {
            return Err(("lpm.capacity>=1", format!("{name} capacity is 0")));
        }
        if q.len() > q.capacity() {
            return Err((
                "lpm.len<=capacity",
                format!("{name} holds {} entries for capacity {}", q.len(), q.capacity()),
            ));
        }
        if let Some(f) = q.iter().find(|f| f.text.is_empty()) {
            return Err(("lpm.fact_non_empty", format!("{name} has empty fact from segment {}", f.source_segment)));
        }
    }
    if let Some(schema) = schema {
        if let Some(k) = persona.user_traits.keys().find(|k| !schema.contains(k)) {
            return Err(("lpm.traits_in_schema", format!("trait `{k}` not in schema")));
        }
    }
    Ok(())
}
