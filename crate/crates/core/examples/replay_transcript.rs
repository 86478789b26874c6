//! Records a scripted episode to a transcript file, replays it in strict
//! mode, and shows that a different user's request diverges.
//!
//! cargo run --example replay_transcript -- [transcript_path]

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrec::agent::{run_episode, AgentConfig};
use toolrec::attrtool::{AttrEncoder, AttributeVocab, RetrievalTool};
use toolrec::llm::{load_transcript, Recorder, ReplayBackend, ScriptedBackend};
use toolrec::seqrec::{BackboneConfig, BackboneParams};
use toolrec::synth;
use toolrec::tools::{Templates, ToolRegistry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("toolrec-transcript.txt"));
    let split = synth::attribute_planted(40, 36, 3, 5, 9, 8).split("synth-movies")?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let backbone = Arc::new(BackboneParams::init(BackboneConfig { dim: 8, layers: 1, heads: 1, max_len: 20, num_items: split.catalog.len() }, &mut rng));
    let vocab = AttributeVocab::from_catalog(&split.catalog, "genre");
    let tool = RetrievalTool::new(AttrEncoder::init("genre", vocab, 8, 1, 20, &mut rng), backbone.clone(), None);
    let registry = ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, vec![tool], Templates::default())?;

    let script = ScriptedBackend::from_texts(["Thought: genre first\nAction: Retrieval[genre, 8]", "Thought: good\nAction: Finish"]);
    let recorder = Recorder::new(script);
    let user = split.history(0).ok_or("no user 0")?;
    let first = run_episode(user, &registry, &recorder, &AgentConfig::default())?;
    recorder.save(&path)?;
    println!("recorded {} turns to {}", recorder.records().len(), path.display());

    let replay = ReplayBackend::new(load_transcript(&path)?, true);
    let again = run_episode(user, &registry, &replay, &AgentConfig::default())?;
    println!("strict replay reproduces the trace: {}", again.trace.to_jsonl() == first.trace.to_jsonl());

    let other = split.history(1).ok_or("no user 1")?;
    match run_episode(other, &registry, &ReplayBackend::new(load_transcript(&path)?, true), &AgentConfig::default()) {
        Ok(_) => println!("unexpected: user 1 replayed cleanly"),
        Err(e) => println!("user 1 diverges: {e}"),
    }
    Ok(())
}
