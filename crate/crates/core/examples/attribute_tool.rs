//! Fine-tunes a genre retrieval tool on top of a frozen backbone and compares
//! how often each model's top 10 matches the user's dominant genre.
//!
//! cargo run --release --example attribute_tool

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use toolrec::attrtool::{fine_tune, param_report, render_param_report, FineTuneConfig, RetrievalTool};
use toolrec::corpus::DatasetSplit;
use toolrec::seqrec::{rank_scores, top_k, train_backbone, TrainConfig};
use toolrec::synth;

fn genre_match(split: &DatasetSplit, history: &[usize], list: &[usize]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &i in history {
        for g in split.catalog.values("genre", i) {
            *counts.entry(g.as_str()).or_default() += 1;
        }
    }
    let Some((top, _)) = counts.into_iter().max_by_key(|&(g, c)| (c, std::cmp::Reverse(g))) else { return 0.0 };
    let hits = list.iter().filter(|&&i| split.catalog.values("genre", i).iter().any(|g| g == top)).count();
    hits as f64 / list.len().max(1) as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split = synth::attribute_planted(300, 400, 4, 5, 10, 1).split("synth-movies")?;
    let backbone = train_backbone(&split, &TrainConfig { dim: 32, lr: 5e-3, batch_size: 64, epochs: 40, seed: 7, ..TrainConfig::default() })?.0;
    let tuned = fine_tune(&backbone, &split, "genre", &FineTuneConfig { lr: 5e-3, batch_size: 64, epochs: 40, ..FineTuneConfig::default() })?;
    println!("{}", render_param_report(&param_report(&backbone, &tuned.encoder)));

    let tool = RetrievalTool::new(tuned.encoder, Arc::new(backbone.clone()), None);
    let (mut base, mut attr) = (0.0, 0.0);
    for h in &split.histories {
        let input = h.test_input();
        let exclude: BTreeSet<usize> = input.iter().copied().collect();
        let b: Vec<usize> = top_k(&backbone, &input, 10, &exclude)?.items.into_iter().map(|(i, _)| i).collect();
        let a: Vec<usize> = rank_scores(&tool.scores(&split.catalog, &input)?, 10, &exclude).items.into_iter().map(|(i, _)| i).collect();
        base += genre_match(&split, &input, &b);
        attr += genre_match(&split, &input, &a);
    }
    let n = split.histories.len() as f64;
    println!("dominant-genre share of top 10: backbone {:.1}%, genre tool {:.1}%", 100.0 * base / n, 100.0 * attr / n);
    Ok(())
}
