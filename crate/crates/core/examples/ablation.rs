//! One-shot ranking ablations. A toy ranker stands in for the LLM: it echoes
//! the candidate block in reverse, so the rank step visibly reorders the pool.
//!
//! cargo run --release --example ablation

use std::sync::Arc;

use toolrec::agent::AgentConfig;
use toolrec::attrtool::{fine_tune, FineTuneConfig, RetrievalTool};
use toolrec::eval::{ablation_pool, run_experiment, AblationMode, AblationSystem, Protocol};
use toolrec::llm::{ChatBackend, ChatTurn, LlmError};
use toolrec::seqrec::{train_backbone, TrainConfig};
use toolrec::synth;
use toolrec::tools::{Templates, ToolRegistry};

struct ReverseRanker;

impl ChatBackend for ReverseRanker {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        let prompt = &turns.last().map(|t| t.content.as_str()).unwrap_or_default();
        let names: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.split_once(" | "))
            .filter(|(id, _)| id.chars().all(|c| c.is_ascii_digit()))
            .map(|(_, name)| name)
            .collect();
        Ok(names.iter().rev().enumerate().map(|(k, n)| format!("{}. {n}", k + 1)).collect::<Vec<_>>().join("\n"))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = synth::attribute_planted(200, 150, 4, 6, 14, 4).split("synth-movies")?;
    let backbone = train_backbone(&split, &TrainConfig { dim: 16, lr: 5e-3, batch_size: 64, epochs: 10, ..TrainConfig::default() })?.0;
    let backbone = Arc::new(backbone);
    let ft = FineTuneConfig { lr: 5e-3, batch_size: 64, epochs: 10, ..FineTuneConfig::default() };
    let tools = ["genre", "release_year"]
        .iter()
        .map(|a| Ok(RetrievalTool::new(fine_tune(&backbone, &split, a, &ft)?.encoder, backbone.clone(), None)))
        .collect::<Result<Vec<_>, toolrec::attrtool::AttrToolError>>()?;
    let registry = ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, tools, Templates::default())?;

    let hist = split.histories[0].test_input();
    for mode in [AblationMode::WSingle, AblationMode::WMulti] {
        let sources: Vec<String> = ablation_pool(&registry, &hist, mode)?.iter().map(|l| format!("{}={}", l.mark.attribute, l.entries.len())).collect();
        println!("{} pool for user 0: {}", mode.as_str(), sources.join(" "));
    }

    let protocol = Protocol { users_per_trial: 50, trials: 2, ..Protocol::default() };
    for mode in [AblationMode::WSingle, AblationMode::WMulti] {
        let sys = AblationSystem { mode, registry: &registry, backend: &ReverseRanker, rank_attribute: None, config: AgentConfig::default() };
        print!("{}", run_experiment(&split, &sys, &protocol, "")?.to_text());
    }
    Ok(())
}
