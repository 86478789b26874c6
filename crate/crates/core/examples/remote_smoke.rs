//! Runs a few episodes against an OpenAI-compatible chat endpoint. Needs
//! TOOLREC_API_KEY; an optional key=value backend config can override the
//! endpoint and model.
//!
//! TOOLREC_API_KEY=... cargo run --example remote_smoke -- [backend.cfg]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrec::agent::{run_episode, AgentConfig};
use toolrec::attrtool::{AttrEncoder, AttributeVocab, RetrievalTool};
use toolrec::llm::{BackendConfig, BackendKind, Recorder, API_KEY_ENV};
use toolrec::seqrec::{BackboneConfig, BackboneParams};
use toolrec::synth;
use toolrec::tools::{Templates, ToolRegistry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    if std::env::var_os(API_KEY_ENV).is_none() {
        eprintln!("set {API_KEY_ENV} to run this example");
        return Ok(());
    }
    let mut cfg = match std::env::args().nth(1) {
        Some(p) => BackendConfig::from_file(p.as_ref())?,
        None => BackendConfig::default(),
    };
    cfg.kind = BackendKind::Remote;
    let backend = Recorder::new(cfg.build()?);

    let split = synth::attribute_planted(40, 36, 3, 5, 9, 3).split("synth-movies")?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let backbone = Arc::new(BackboneParams::init(BackboneConfig { dim: 8, layers: 1, heads: 1, max_len: 20, num_items: split.catalog.len() }, &mut rng));
    let tools = ["genre", "release_year"]
        .iter()
        .map(|a| RetrievalTool::new(AttrEncoder::init(a, AttributeVocab::from_catalog(&split.catalog, a), 8, 1, 20, &mut rng), backbone.clone(), None))
        .collect();
    let registry = ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, tools, Templates::default())?;

    for h in split.histories.iter().take(3) {
        let r = run_episode(h, &registry, &backend, &AgentConfig::default())?;
        let hit = r.final_ids().contains(&h.target);
        println!("user {}: {} after {} rounds, {} items, hit={hit}", h.user_id, r.termination, r.rounds, r.final_ids().len());
    }
    let out = std::env::temp_dir().join("toolrec-remote-transcript.txt");
    backend.save(&out)?;
    println!("transcript: {}", out.display());
    Ok(())
}
