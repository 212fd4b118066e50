//! Query-time retrieval across the three tiers, prompt assembly and response
//! generation.
//!
//! Mid-term retrieval is two-stage: rank segments by F-score against the
//! query (query embedding plus query keywords), keep the best `top_m`, then
//! rank every page of those segments by embedding cosine and keep the best
//! `top_k` overall. Each segment contributing a page is touched once.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::lpm::retrieve_persona;
use crate::memory::{UpdateReport, UserMemory};
use crate::model::{DialoguePage, RetrievalBundle, ScoredPage, SegmentId, Timestamp};
use crate::mtm::{score_against, MidTermMemory};
use crate::providers::Provider;
use crate::similarity::cosine;

const RESPONSE_PROMPT: &str = include_str!("../assets/response_prompt.toml");

#[derive(Deserialize)]
struct PromptTemplate {
    version: u32,
    template: String,
}

fn template() -> &'static PromptTemplate {
    static T: OnceLock<PromptTemplate> = OnceLock::new();
    T.get_or_init(|| toml::from_str(RESPONSE_PROMPT).expect("bundled response prompt parses"))
}

/// Version of the bundled response prompt template.
pub fn prompt_template_version() -> u32 {
    template().version
}

/// A query prepared for scoring.
#[derive(Debug, Clone)]
pub struct QueryProbe {
    pub keywords: BTreeSet<String>,
    pub embedding: Vec<f64>,
}

impl QueryProbe {
    pub fn new(query: &str, provider: &Provider) -> Result<Self> {
        if query.trim().is_empty() {
            return Err(Error::InvalidArgument("query must be non-empty".into()));
        }
        Ok(Self { embedding: provider.embed(query)?, keywords: provider.extract_keywords(query)? })
    }
}

/// Two-stage mid-term selection without side effects.
pub fn select_mtm_pages(
    mtm: &MidTermMemory,
    probe: &QueryProbe,
    top_m: usize,
    top_k: usize,
) -> Result<Vec<ScoredPage>> {
    let mut segments = mtm
        .iter()
        .map(|s| Ok((score_against(&probe.keywords, &probe.embedding, s)?, s)))
        .collect::<Result<Vec<_>>>()?;
    segments.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.last_access.cmp(&a.1.last_access))
            .then(a.1.id.cmp(&b.1.id))
    });

    let mut pages = Vec::new();
    for (_, seg) in segments.into_iter().take(top_m) {
        for page in &seg.pages {
            pages.push((cosine(&page.embedding, &probe.embedding)?, seg.id, page));
        }
    }
    pages.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.2.timestamp.cmp(&a.2.timestamp))
            .then(a.2.id.cmp(&b.2.id))
    });
    Ok(pages
        .into_iter()
        .take(top_k)
        .map(|(score, segment_id, page)| ScoredPage { segment_id, page: page.clone(), score })
        .collect())
}

/// Build the bundle for `query` without touching any counters.
pub fn peek(
    memory: &UserMemory,
    query: &str,
    config: &Config,
    provider: &Provider,
) -> Result<RetrievalBundle> {
    let probe = QueryProbe::new(query, provider)?;
    build_bundle(memory, &probe, config)
}

fn build_bundle(memory: &UserMemory, probe: &QueryProbe, config: &Config) -> Result<RetrievalBundle> {
    let mtm_pages = select_mtm_pages(&memory.mtm, probe, config.top_m_segments, config.top_k_pages)?;
    let persona = retrieve_persona(&memory.persona, &probe.embedding, config.lpm_top_n)?;
    Ok(RetrievalBundle {
        stm_pages: memory.stm.all_pages(),
        mtm_pages,
        user_kb_hits: persona.user_kb_hits,
        agent_trait_hits: persona.agent_trait_hits,
        user_profile: persona.user_profile,
        user_traits: persona.user_traits,
        agent_profile: persona.agent_profile,
    })
}

/// Segments that contributed at least one page to `bundle`, in id order.
pub fn contributing_segments(bundle: &RetrievalBundle) -> BTreeSet<SegmentId> {
    bundle.mtm_pages.iter().map(|p| p.segment_id).collect()
}

/// Retrieve from every tier and record the hit on each contributing segment.
///
/// Either every contributing segment is touched or none is.
pub fn retrieve(
    memory: &mut UserMemory,
    query: &str,
    config: &Config,
    provider: &Provider,
    now: Timestamp,
) -> Result<RetrievalBundle> {
    let bundle = peek(memory, query, config, provider)?;
    let touched = contributing_segments(&bundle);
    for id in &touched {
        let seg = memory.mtm.get(*id).ok_or_else(|| Error::NotFound(format!("segment {id}")))?;
        if now < seg.last_access {
            return Err(Error::ClockRegression { now, last_access: seg.last_access });
        }
    }
    for id in touched {
        memory.mtm.touch(id, now)?;
    }
    Ok(bundle)
}

fn render_pages<'a>(out: &mut String, pages: impl Iterator<Item = &'a DialoguePage>) {
    for p in pages {
        let _ = writeln!(out, "[t={}] User: {}", p.timestamp, p.query);
        let _ = writeln!(out, "[t={}] Agent: {}", p.timestamp, p.response);
    }
}

/// Deterministic prompt from a bundle and the query.
pub fn assemble_prompt(bundle: &RetrievalBundle, query: &str) -> String {
    let kv = |map: &std::collections::BTreeMap<String, String>| {
        map.iter().map(|(k, v)| format!("{k}: {v}\n")).collect::<String>()
    };
    let facts = |hits: &[crate::model::ScoredFact]| {
        hits.iter().map(|h| format!("- {}\n", h.fact.text)).collect::<String>()
    };
    let traits = bundle
        .user_traits
        .iter()
        .map(|(k, t)| format!("{k}: {} (confidence {:.2})\n", t.value, t.confidence))
        .collect::<String>();
    let mut mtm = String::new();
    render_pages(&mut mtm, bundle.mtm_pages.iter().map(|p| &p.page));
    let mut stm = String::new();
    render_pages(&mut stm, bundle.stm_pages.iter());

    let sections: [(&str, String); 8] = [
        ("agent_profile", kv(&bundle.agent_profile)),
        ("agent_traits", facts(&bundle.agent_trait_hits)),
        ("user_profile", kv(&bundle.user_profile)),
        ("user_traits", traits),
        ("user_kb", facts(&bundle.user_kb_hits)),
        ("mtm_pages", mtm),
        ("stm_pages", stm),
        ("query", format!("{query}\n")),
    ];

    // Each placeholder sits alone on its line; an empty section drops the line.
    let mut prompt = String::new();
    for line in template().template.lines() {
        let key = line.strip_prefix('{').and_then(|l| l.strip_suffix('}'));
        match key.and_then(|k| sections.iter().find(|(name, _)| *name == k)) {
            Some((_, body)) => prompt.push_str(body),
            None => {
                prompt.push_str(line);
                prompt.push('\n');
            }
        }
    }
    prompt
}

/// Outcome of [`respond`].
#[derive(Debug, Clone)]
pub struct Response {
    pub text: String,
    pub bundle: RetrievalBundle,
    pub prompt: String,
    pub update: UpdateReport,
}

/// Retrieve, generate a response, then store the exchange.
///
/// All work happens on a copy of `memory`; it is replaced only when every
/// step succeeds.
pub fn respond(
    memory: &mut UserMemory,
    query: &str,
    config: &Config,
    provider: &Provider,
    now: Timestamp,
) -> Result<Response> {
    let mut next = memory.clone();
    let bundle = retrieve(&mut next, query, config, provider, now)?;
    let prompt = assemble_prompt(&bundle, query);
    let text = provider.complete(&prompt)?;
    let update = next.ingest_in_place(query, &text, config, provider, now)?;
    *memory = next;
    Ok(Response { text, bundle, prompt, update })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, RawConfig};
    use crate::model::{IdGenerator, Segment};
    use crate::providers::{FaultInjectingProvider, StubProvider};
    use std::sync::Arc;

    fn segment_from(provider: &Provider, ids: &mut IdGenerator, texts: &[&str], ts: u64) -> Segment {
        let pages: Vec<DialoguePage> = texts
            .iter()
            .map(|t| {
                let mut p = DialoguePage::new(ids, *t, "", ts).unwrap();
                p.keywords = provider.extract_keywords(t).unwrap();
                p.embedding = provider.embed(t).unwrap();
                p
            })
            .collect();
        let summary = texts.join(" ");
        Segment {
            id: ids.next_segment(),
            keywords: provider.extract_keywords(&summary).unwrap(),
            embedding: provider.embed(&summary).unwrap(),
            summary,
            pages,
            n_visit: 0,
            l_interaction: texts.len() as u64,
            last_access: ts,
        }
    }

    #[test]
    fn empty_memory_gives_empty_bundle() {
        let config = Config::default();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        let b = retrieve(&mut mem, "hello", &config, &provider, 0).unwrap();
        assert_eq!(b, RetrievalBundle::default());
    }

    #[test]
    fn top_k_pages_within_one_segment_by_cosine() {
        let config = validate_config(RawConfig { top_k_pages: Some(2), ..Default::default() }).unwrap();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        let texts = ["red apple pie", "apple orchard", "fast car engine"];
        let seg = segment_from(&provider, &mut mem.ids, &texts, 5);
        mem.mtm.insert_segment(seg).unwrap();

        let q = provider.embed("apple pie recipe").unwrap();
        // Brute-force: cosine of every page against the query, descending.
        let mut expected: Vec<(f64, &str)> = texts
            .iter()
            .map(|t| (cosine(&provider.embed(t).unwrap(), &q).unwrap(), *t))
            .collect();
        expected.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        let b = retrieve(&mut mem, "apple pie recipe", &config, &provider, 5).unwrap();
        let got: Vec<_> = b.mtm_pages.iter().map(|p| (p.score, p.page.query.as_str())).collect();
        assert_eq!(got, expected[..2].to_vec());
        assert!(got[0].0 >= got[1].0);
        assert_eq!(mem.mtm.iter().next().unwrap().n_visit, 1);
    }

    #[test]
    fn bounded_by_top_m_and_top_k() {
        let config = Config::default();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        for s in 0..20 {
            let texts: Vec<String> = (0..10).map(|p| format!("topic{s} detail{p} shared")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let seg = segment_from(&provider, &mut mem.ids, &refs, 1);
            mem.mtm.insert_segment(seg).unwrap();
        }
        let probe = QueryProbe::new("topic3 topic7 shared", &provider).unwrap();
        let mut ranked: Vec<(f64, SegmentId, u64)> = mem
            .mtm
            .iter()
            .map(|s| (score_against(&probe.keywords, &probe.embedding, s).unwrap(), s.id, s.last_access))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.2.cmp(&a.2)).then(a.1.cmp(&b.1)));
        let top5: BTreeSet<SegmentId> = ranked.iter().take(5).map(|r| r.1).collect();

        let b = retrieve(&mut mem, "topic3 topic7 shared", &config, &provider, 2).unwrap();
        assert_eq!(b.mtm_pages.len(), 10);
        assert!(b.mtm_pages.iter().all(|p| top5.contains(&p.segment_id)));
    }

    #[test]
    fn prompt_sections_fixed_and_deterministic() {
        let empty = assemble_prompt(&RetrievalBundle::default(), "what now?");
        assert_eq!(
            empty,
            "[Agent profile]\n[Agent traits]\n[User profile]\n[User traits]\n[User knowledge]\n\
             [Relevant past conversation]\n[Recent conversation]\n[Current query]\nwhat now?\n"
        );
        assert_eq!(empty, assemble_prompt(&RetrievalBundle::default(), "what now?"));

        let mut ids = IdGenerator::new();
        let mut bundle = RetrievalBundle::default();
        bundle.agent_profile.insert("role".into(), "travel assistant".into());
        for i in 0..3 {
            bundle.stm_pages.push(DialoguePage::new(&mut ids, format!("q{i}"), format!("r{i}"), i).unwrap());
        }
        let prompt = assemble_prompt(&bundle, "next?");
        let order = ["[Agent profile]", "role: travel assistant", "[User knowledge]", "[Recent conversation]", "[t=0] User: q0", "[t=2] Agent: r2", "[Current query]"];
        let positions: Vec<_> = order.iter().map(|s| prompt.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{prompt}");
        assert_eq!(prompt_template_version(), 1);
    }

    #[test]
    fn first_respond_stores_one_page() {
        let config = Config::default();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        let r = respond(&mut mem, "hello there", &config, &provider, 1).unwrap();
        assert!(r.text.starts_with("STUB-RESPONSE("));
        assert_eq!(r.text, format!("STUB-RESPONSE({})", &r.prompt[..64]));
        assert_eq!(mem.stm.len(), 1);
    }

    #[test]
    fn eight_responds_spill_into_mtm() {
        let config = Config::default();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        for i in 0..8 {
            respond(&mut mem, &format!("message number {i}"), &config, &provider, i).unwrap();
        }
        assert!(mem.mtm.page_count() >= 1);
    }

    #[test]
    fn failed_respond_changes_nothing() {
        let config = Config::default();
        let fault = Arc::new(FaultInjectingProvider::new(Arc::new(StubProvider::default()), 0.0, 1));
        let provider = Provider::new(fault.clone());
        let mut mem = UserMemory::new("u", &config).unwrap();
        for i in 0..9 {
            respond(&mut mem, &format!("warmup {i}"), &config, &provider, i).unwrap();
        }
        let before = serde_json::to_vec(&mem).unwrap();
        fault.set_failure_rate(1.0);
        assert!(respond(&mut mem, "fails", &config, &provider, 20).unwrap_err().is_provider_unavailable());
        assert_eq!(serde_json::to_vec(&mem).unwrap(), before);
    }

    #[test]
    fn peek_touches_nothing() {
        let config = Config::default();
        let provider = Provider::stub();
        let mut mem = UserMemory::new("u", &config).unwrap();
        let seg = segment_from(&provider, &mut mem.ids, &["jazz music concert"], 1);
        mem.mtm.insert_segment(seg).unwrap();
        let a = peek(&mem, "jazz", &config, &provider).unwrap();
        let b = peek(&mem, "jazz", &config, &provider).unwrap();
        assert_eq!(a, b);
        assert_eq!(mem.mtm.iter().next().unwrap().n_visit, 0);
    }
}
