//! Compares the backbone with a genre retrieval tool under the sampled-user
//! protocol and prints both reports.
//!
//! cargo run --release --example evaluate

use std::sync::Arc;

use toolrec::attrtool::{fine_tune, FineTuneConfig, RetrievalTool};
use toolrec::eval::{run_experiment, AttrToolSystem, BackboneSystem, Protocol};
use toolrec::seqrec::{train_backbone, TrainConfig};
use toolrec::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = synth::attribute_planted(300, 200, 4, 6, 16, 2).split("synth-movies")?;
    let backbone = train_backbone(&split, &TrainConfig { dim: 32, lr: 5e-3, batch_size: 64, epochs: 20, ..TrainConfig::default() })?.0;
    let tuned = fine_tune(&backbone, &split, "genre", &FineTuneConfig { lr: 5e-3, batch_size: 64, epochs: 20, ..FineTuneConfig::default() })?;
    let tool = RetrievalTool::new(tuned.encoder, Arc::new(backbone.clone()), None);

    let protocol = Protocol { users_per_trial: 100, trials: 3, parallel: true, ..Protocol::default() };
    let base = run_experiment(&split, &BackboneSystem { params: &backbone }, &protocol, "")?;
    let attr = run_experiment(&split, &AttrToolSystem { tool: &tool, split: &split }, &protocol, "")?;
    print!("{}\n{}", base.to_text(), attr.to_text());
    Ok(())
}
