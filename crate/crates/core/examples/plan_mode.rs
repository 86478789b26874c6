//! Plan mode: the backend writes every action up front and the plan runs
//! without feedback. Actions after the first Finish are ignored.
//!
//! cargo run --example plan_mode

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrec::agent::{run_plan_mode, AgentConfig};
use toolrec::attrtool::{AttrEncoder, AttributeVocab, RetrievalTool};
use toolrec::llm::ScriptedBackend;
use toolrec::seqrec::{BackboneConfig, BackboneParams};
use toolrec::synth;
use toolrec::tools::{Templates, ToolRegistry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = synth::attribute_planted(40, 36, 3, 5, 9, 5).split("synth-movies")?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let backbone = Arc::new(BackboneParams::init(BackboneConfig { dim: 8, layers: 1, heads: 1, max_len: 20, num_items: split.catalog.len() }, &mut rng));
    let tools = ["genre", "release_year"]
        .iter()
        .map(|a| RetrievalTool::new(AttrEncoder::init(a, AttributeVocab::from_catalog(&split.catalog, a), 8, 1, 20, &mut rng), backbone.clone(), None))
        .collect();
    let registry = ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, tools, Templates::default())?;

    let plan = "1. Retrieval[genre, 4]\n2. Retrieval[release_year, 4]\n3. Finish[6]\n4. Retrieval[genre, 2]";
    let h = split.history(0).ok_or("no user 0")?;
    let r = run_plan_mode(h, &registry, &ScriptedBackend::from_texts([plan]), &AgentConfig::default())?;
    for s in &r.trace.steps {
        println!("round {} {} -> {} items", s.round, s.action, s.list.len());
    }
    let names: Vec<&str> = r.final_ids().iter().map(|&i| split.catalog.name(i)).collect();
    println!("{}: {}", r.termination, names.join("; "));
    Ok(())
}
