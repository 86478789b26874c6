//! One agent episode driven by a scripted backend: two retrievals, a rank
//! over their union, then Finish. Prints the prompt context, the trace, and
//! the memory dump.
//!
//! cargo run --example scripted_episode

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolrec::agent::{render_context, run_episode, AgentConfig};
use toolrec::attrtool::{AttrEncoder, AttributeVocab, RetrievalTool};
use toolrec::llm::ScriptedBackend;
use toolrec::seqrec::{BackboneConfig, BackboneParams};
use toolrec::synth;
use toolrec::tools::{Templates, ToolRegistry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = synth::attribute_planted(40, 36, 3, 5, 9, 3).split("synth-movies")?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let backbone = Arc::new(BackboneParams::init(BackboneConfig { dim: 8, layers: 1, heads: 1, max_len: 20, num_items: split.catalog.len() }, &mut rng));
    let tools = ["genre", "release_year"]
        .iter()
        .map(|a| RetrievalTool::new(AttrEncoder::init(a, AttributeVocab::from_catalog(&split.catalog, a), 8, 1, 20, &mut rng), backbone.clone(), None))
        .collect();
    let registry = ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, tools, Templates::default())?;

    // the rank reply must name candidates, so compute them up front
    let h = split.history(0).ok_or("no user 0")?;
    let hist = h.test_input();
    let mut exclude: BTreeSet<usize> = hist.iter().copied().collect();
    let g = registry.run_retrieval("genre", &hist, 5, 1, &exclude)?.ids();
    exclude.extend(&g);
    let y = registry.run_retrieval("release_year", &hist, 3, 2, &exclude)?.ids();
    let ranked: Vec<String> = [y[0], g[2], g[0], y[1]].iter().enumerate().map(|(k, &i)| format!("{}. {}", k + 1, split.catalog.name(i))).collect();

    let script = format!(
        "=== reply\nThought: Start from the user's favourite genre.\nAction: Retrieval[genre, 5]\n\
         === reply\nThought: Add films from the same period.\nAction: Retrieval[release_year, 3]\n\
         === reply\nThought: Order what I have.\nAction: Rank[genre, 4]\n\
         === reply match=Please rank\n{}\n\
         === reply\nThought: Done.\nAction: Finish\n",
        ranked.join("\n")
    );
    let r = run_episode(h, &registry, &ScriptedBackend::parse(&script), &AgentConfig::default())?;
    for turn in render_context(&r.context) {
        println!("[{}]\n{}\n", turn.role.as_str(), turn.content);
    }
    println!("--- trace\n{}", r.trace.to_jsonl());
    println!("--- memory\n{}", r.memory_dump);
    let names: Vec<&str> = r.final_ids().iter().map(|&i| split.catalog.name(i)).collect();
    println!("{} after {} rounds: {}", r.termination, r.rounds, names.join("; "));
    println!("held-out target: {}", split.catalog.name(h.target));
    Ok(())
}
