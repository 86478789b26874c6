//! Writes a synthetic corpus in the raw file formats, ingests it, and prints
//! the statistics table.
//!
//! cargo run --example ingest_and_stats -- [out_dir]

use std::path::PathBuf;

use toolrec::corpus::{ingest, save_split, IngestOptions};
use toolrec::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("toolrec-demo"));
    let corpus = synth::attribute_planted(300, 120, 4, 6, 20, 7);
    let (interactions, items) = corpus.write(&out.join("raw"))?;
    println!("raw files: {} {}", interactions.display(), items.display());

    let opts = IngestOptions { dataset_name: "synth-movies".into(), k_core: 5, bucketize: vec!["release_year".into()] };
    let split = ingest(&interactions, &items, &opts)?;
    let s = &split.stats;
    println!("dataset\tusers\titems\tinteractions\tsparsity");
    println!("{}\t{}\t{}\t{}\t{:.2}%", split.name, s.num_users, s.num_items, s.num_interactions, s.sparsity_percent);

    let h = &split.histories[0];
    let names: Vec<&str> = h.sequence.iter().take(5).map(|&i| split.catalog.name(i)).collect();
    println!("user {} starts with: {}", h.raw_user_id, names.join(", "));
    println!("release_year tokens: {:?}", split.catalog.vocabulary("release_year"));

    save_split(&split, &out.join("split"))?;
    println!("split saved under {}", out.join("split").display());
    Ok(())
}
