use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TraitSchema;
use crate::error::{Error, Result};
use crate::model::{Embedding, Segment};

use super::{PersonaUpdates, ProviderBackend, SummaryKind};

/// Wraps a backend and fails each call with a configurable probability.
///
/// Used for chaos testing of the check-then-commit paths. A rate of 1.0
/// simulates a provider that is fully down; 0.0 passes everything through.
pub struct FaultInjectingProvider {
    inner: Arc<dyn ProviderBackend>,
    rate_bits: AtomicU64,
    rng: Mutex<ChaCha8Rng>,
}

impl FaultInjectingProvider {
    pub fn new(inner: Arc<dyn ProviderBackend>, failure_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            rate_bits: AtomicU64::new(failure_rate.clamp(0.0, 1.0).to_bits()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn failure_rate(&self) -> f64 {
        f64::from_bits(self.rate_bits.load(Ordering::SeqCst))
    }

    pub fn set_failure_rate(&self, rate: f64) {
        self.rate_bits.store(rate.clamp(0.0, 1.0).to_bits(), Ordering::SeqCst);
    }

    fn gate(&self, task: &str) -> Result<()> {
        let rate = self.failure_rate();
        let roll: f64 = self.rng.lock().unwrap_or_else(|e| e.into_inner()).gen();
        if roll < rate {
            return Err(Error::ProviderUnavailable(format!("injected fault in {task}")));
        }
        Ok(())
    }
}

impl ProviderBackend for FaultInjectingProvider {
    fn name(&self) -> &str {
        "fault-injecting"
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.gate("embed")?;
        self.inner.embed(text)
    }

    fn extract_keywords(&self, text: &str) -> Result<BTreeSet<String>> {
        self.gate("extract_keywords")?;
        self.inner.extract_keywords(text)
    }

    fn judge_continuity(&self, page_text: &str, chain_meta: &str) -> Result<bool> {
        self.gate("judge_continuity")?;
        self.inner.judge_continuity(page_text, chain_meta)
    }

    fn summarize(&self, kind: SummaryKind, texts: &[String]) -> Result<String> {
        self.gate("summarize")?;
        self.inner.summarize(kind, texts)
    }

    fn extract_persona_updates(
        &self,
        segment: &Segment,
        schema: &TraitSchema,
    ) -> Result<PersonaUpdates> {
        self.gate("extract_persona_updates")?;
        self.inner.extract_persona_updates(segment, schema)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.gate("complete")?;
        self.inner.complete(prompt)
    }
}
