mod common;

use std::collections::BTreeSet;

use toolrec::llm::{ScriptedBackend, ScriptedReply};
use toolrec::memory::MemoryStore;

const FAKE: &str = "The Phantom Reel (1999)";

fn gated(gate: &str, text: String) -> ScriptedReply {
    ScriptedReply { gate: Some(gate.into()), text }
}

/// Memory holding a genre list of 5 and a release_year list of 3.
fn seeded<'a>(w: &'a common::World, hist: &[usize]) -> (MemoryStore<'a>, Vec<usize>) {
    let mut memory = w.registry.new_memory();
    let mut exclude: BTreeSet<usize> = hist.iter().copied().collect();
    let g = w.registry.run_retrieval("genre", hist, 5, 1, &exclude).unwrap();
    exclude.extend(g.ids());
    let y = w.registry.run_retrieval("release_year", hist, 3, 2, &exclude).unwrap();
    memory.store(g);
    memory.store(y);
    let prior = memory.chronological().iter().map(|e| e.item).collect();
    (memory, prior)
}

#[test]
fn fabricated_title_triggers_one_rerun_carrying_it() {
    let w = common::world(7);
    let hist = w.split.histories[0].test_input();
    let (mut memory, prior) = seeded(&w, &hist);
    let name = |i: usize| w.split.catalog.name(i).to_string();
    let backend = ScriptedBackend::new(vec![
        gated("Please rank", format!("1. {}\n2. {FAKE}\n3. {}", name(prior[4]), name(prior[1]))),
        gated(FAKE, format!("1. {}\n2. {}\n3. {}", name(prior[4]), name(prior[1]), name(prior[6]))),
    ]);
    let out = w.registry.run_rank(&hist, &mut memory, "genre", 3, 3, &backend).unwrap();
    assert_eq!((out.reruns, out.fallback, out.prompts.len()), (1, false, 2));
    assert!(!out.prompts[0].contains(FAKE));
    assert_eq!(out.prompts[1].matches(FAKE).count(), 1);
    assert!(out.prompts[1].starts_with(&out.prompts[0]));
    assert_eq!(out.list.ids(), vec![prior[4], prior[1], prior[6]]);
    assert_eq!(memory.rejections().len(), 1);
    assert_eq!(memory.rejections()[0].invalid, vec![FAKE.to_string()]);
    assert_eq!(backend.remaining(), 0);
}

#[test]
fn history_items_count_as_invalid() {
    let w = common::world(7);
    let hist = w.split.histories[1].test_input();
    let (mut memory, prior) = seeded(&w, &hist);
    let name = |i: usize| w.split.catalog.name(i).to_string();
    let backend = ScriptedBackend::from_texts([format!("1. {}\n2. {}", name(hist[0]), name(prior[0])), format!("1. {}", name(prior[2]))]);
    let out = w.registry.run_rank(&hist, &mut memory, "genre", 2, 3, &backend).unwrap();
    assert_eq!(out.reruns, 1);
    assert!(out.prompts[1].contains(&name(hist[0])));
    // a short valid answer is topped up from prior order
    assert_eq!(out.list.ids(), vec![prior[2], prior[0]]);
}

#[test]
fn three_failed_retries_fall_back_to_prior_order() {
    let w = common::world(7);
    let hist = w.split.histories[2].test_input();
    let (mut memory, prior) = seeded(&w, &hist);
    let backend = ScriptedBackend::from_texts((0..5).map(|i| format!("1. {FAKE}\n2. Nonexistent Picture {i}")));
    let out = w.registry.run_rank(&hist, &mut memory, "release_year", 4, 3, &backend).unwrap();
    assert_eq!((out.reruns, out.fallback, out.prompts.len()), (3, true, 4));
    assert_eq!(backend.calls(), 4);
    assert_eq!(out.list.ids(), prior[..4].to_vec());
    let conf: Vec<f64> = out.list.entries.iter().map(|e| e.confidence).collect();
    assert_eq!(conf, vec![1.0, 0.5, 1.0 / 3.0, 0.25]);
    let retries: Vec<usize> = memory.rejections().iter().map(|r| r.retry).collect();
    assert_eq!(retries, vec![0, 1, 2, 3]);
    assert!(out.prompts[3].contains("Nonexistent Picture 2"));
}

#[test]
fn rank_without_prior_candidates_is_an_observation() {
    let w = common::world(7);
    let hist = w.split.histories[0].test_input();
    let mut memory = w.registry.new_memory();
    let backend = ScriptedBackend::from_texts(Vec::<String>::new());
    let err = w.registry.run_rank(&hist, &mut memory, "genre", 3, 1, &backend).unwrap_err();
    assert!(err.is_observation());
    assert_eq!(backend.calls(), 0);
}
