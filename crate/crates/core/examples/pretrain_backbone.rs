//! Trains the sequential backbone on a corpus where every item is followed
//! by its successor, then reports Recall@10 and writes a checkpoint.
//!
//! cargo run --release --example pretrain_backbone -- [checkpoint_path]

use std::collections::BTreeSet;
use std::path::PathBuf;

use toolrec::eval::recall_at_n;
use toolrec::seqrec::{top_k, train_backbone, TrainConfig};
use toolrec::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("toolrec-backbone.ckpt"));
    let split = synth::planted_successor(200, 50, 8, 20, 1).split("successor")?;
    let cfg = TrainConfig { dim: 32, layers: 2, lr: 5e-3, batch_size: 32, epochs: 30, patience: 30, ..TrainConfig::default() };
    let (params, log) = train_backbone(&split, &cfg)?;
    print!("{}", log.to_text());

    let mut hits = 0.0;
    for h in &split.histories {
        let input = h.test_input();
        let exclude: BTreeSet<usize> = input.iter().copied().collect();
        let ranked: Vec<usize> = top_k(&params, &input, 10, &exclude)?.items.into_iter().map(|(i, _)| i).collect();
        hits += recall_at_n(&ranked, h.target, 10);
    }
    println!("recall@10 on held-out targets: {:.3}", hits / split.histories.len() as f64);

    params.to_checkpoint(&split.name).write(&out)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}
