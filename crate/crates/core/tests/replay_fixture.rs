use std::path::PathBuf;
use std::time::Instant;

use memstrata_core::eval::{replay, Transcript};
use memstrata_core::persistence::MemorySnapshot;
use memstrata_core::{Config, Provider};

fn fixture() -> Transcript {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/conversation_40.jsonl");
    Transcript::from_path(&path).unwrap()
}

#[test]
fn fixture_replay_is_deterministic() {
    let t = fixture();
    assert_eq!(t.turns.len(), 40);
    let config = Config::default();
    let start = Instant::now();
    let a = replay(&t, "maya", &config, &Provider::stub()).unwrap();
    let b = replay(&t, "maya", &config, &Provider::stub()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);

    let snap = |m| MemorySnapshot::capture(m, 0).to_canonical_json();
    assert_eq!(snap(&a.memory), snap(&b.memory));
    assert_eq!(
        serde_json::to_vec(&a.report.answers).unwrap(),
        serde_json::to_vec(&b.report.answers).unwrap()
    );
    a.memory.check_invariants(Some(&config)).unwrap();
}

// Regression values for the stub provider with default config. A change here
// means the engine now issues a different number of provider requests.
const INGEST_CALLS: u64 = 244;
const RESPOND_CALLS: u64 = 139;
const ANSWERS: u64 = 12;

#[test]
fn fixture_call_counts_are_stable() {
    let out = replay(&fixture(), "maya", &Config::default(), &Provider::stub()).unwrap();
    let r = &out.report;
    assert_eq!(r.ingest.calls, INGEST_CALLS);
    assert_eq!(r.respond.calls, RESPOND_CALLS);
    assert_eq!(r.questions as u64, ANSWERS);
    assert_eq!(r.avg_calls_per_respond, RESPOND_CALLS as f64 / ANSWERS as f64);
    assert_eq!(r.total.calls, INGEST_CALLS + RESPOND_CALLS);
    assert_eq!(r.total.failed_calls, 0);
    assert!(r.answers.iter().all(|a| a.recalled_tokens > 0 && a.provider_calls >= 3));
}
