mod common;


use toolrec::agent::{run_episode, run_plan_mode, AgentConfig, Termination};
use toolrec::llm::{ScriptedBackend, UnavailableBackend};

/// Compares `actual` with the frozen file, or rewrites it when `TOOLREC_BLESS` is set.
fn golden(name: &str, actual: &str) {
    let path = common::golden_dir().join(name);
    if std::env::var_os("TOOLREC_BLESS").is_some() {
        std::fs::create_dir_all(common::golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}; run with TOOLREC_BLESS=1", path.display()));
    assert!(expected == actual, "{name} differs from the golden file\n--- expected\n{expected}\n--- actual\n{actual}");
}

#[test]
fn four_step_episode_matches_golden_trace() {
    let w = common::world(3);
    let (script, expected) = common::four_step_script(&w, 0);
    let backend = ScriptedBackend::parse(&script);
    let r = run_episode(w.split.history(0).unwrap(), &w.registry, &backend, &AgentConfig::default()).unwrap();
    assert_eq!(backend.remaining(), 0);
    assert_eq!((r.termination, r.rounds), (Termination::Finish, 4));
    let actions: Vec<&str> = r.trace.steps.iter().map(|s| s.action.as_str()).collect();
    assert_eq!(actions, ["Retrieval[genre, 5]", "Retrieval[release_year, 3]", "Rank[actor, 4]", "Finish"]);
    assert_eq!(r.trace.steps[2].reruns, 0);
    assert_eq!(r.final_ids(), expected);
    golden("four_step_trace.jsonl", &r.trace.to_jsonl());
    golden("four_step_memory.tsv", &r.memory_dump);
}

#[test]
fn nine_actions_stop_at_round_eight() {
    let w = common::world(4);
    let replies: Vec<String> = (0..9)
        .map(|i| format!("Thought: step {i}\nAction: Retrieval[{}, 2]", if i % 2 == 0 { "genre" } else { "release_year" }))
        .collect();
    let backend = ScriptedBackend::from_texts(replies);
    let h = w.split.history(1).unwrap();
    let r = run_episode(h, &w.registry, &backend, &AgentConfig::default()).unwrap();
    assert_eq!((r.termination, r.rounds, r.trace.steps.len()), (Termination::RoundCap, 8, 8));
    assert_eq!(backend.remaining(), 1);
    assert_eq!(r.final_ids().len(), 10);
    common::sound(&w.split, &h.test_input(), &r.final_ids(), 10).unwrap();
}

#[test]
fn malformed_actions_are_corrected_then_capped() {
    let w = common::world(4);
    let h = w.split.history(2).unwrap();
    let backend = ScriptedBackend::from_texts(["I think", "Action: Retrieve genre", "Thought: x\nAction: Search[genre, 3]", "???"]);
    let r = run_episode(h, &w.registry, &backend, &AgentConfig::default()).unwrap();
    assert_eq!((r.termination, r.rounds), (Termination::MalformedLimit, 4));
    assert!(r.context.steps.iter().all(|s| s.observation.starts_with(toolrec::agent::CORRECTIVE_OBSERVATION)));
    assert!(r.final_ids().is_empty());
}

#[test]
fn unavailable_backend_ends_with_backend_failure() {
    let w = common::world(4);
    let r = run_episode(w.split.history(0).unwrap(), &w.registry, &UnavailableBackend, &AgentConfig::default()).unwrap();
    assert_eq!((r.termination, r.rounds), (Termination::BackendFailure, 0));
}

#[test]
fn unknown_attribute_is_an_observation() {
    let w = common::world(4);
    let h = w.split.history(0).unwrap();
    let backend = ScriptedBackend::from_texts(["Thought: a\nAction: Retrieval[director, 5]", "Thought: b\nAction: Retrieval[Genre, 99]", "Thought: c\nAction: Finish[3]"]);
    let r = run_episode(h, &w.registry, &backend, &AgentConfig::default()).unwrap();
    let obs: Vec<&str> = r.context.steps.iter().map(|s| s.observation.as_str()).collect();
    assert!(obs[0].contains("Unknown attribute 'director'") && obs[0].contains("genre"), "{}", obs[0]);
    assert_eq!(r.trace.steps[1].list.len(), 20);
    assert_eq!(r.final_ids().len(), 3);
}

#[test]
fn plan_mode_runs_actions_in_order() {
    let w = common::world(5);
    let h = w.split.history(0).unwrap();
    let plan = "1. Retrieval[genre, 4]\n2. Retrieval[release_year, 4]\n3. Lookup[actor]\n4. Finish[6]\n5. Retrieval[genre, 2]";
    let backend = ScriptedBackend::from_texts([plan]);
    let r = run_plan_mode(h, &w.registry, &backend, &AgentConfig::default()).unwrap();
    let actions: Vec<&str> = r.trace.steps.iter().map(|s| s.action.as_str()).collect();
    assert_eq!(&actions[..2], ["Retrieval[genre, 4]", "Retrieval[release_year, 4]"]);
    assert!(!actions.contains(&"Retrieval[genre, 2]"));
    assert_eq!(r.termination, Termination::Finish);
    assert_eq!(r.final_ids().len(), 6);
    common::sound(&w.split, &h.test_input(), &r.final_ids(), 10).unwrap();
}

#[test]
fn randomized_scripted_episodes_are_sound() {
    let terminations = common::random_episodes(100).unwrap();
    assert!(terminations.len() >= 3, "{terminations:?}");
}
