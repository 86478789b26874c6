//! Synthetic corpora with known structure, written in the same file formats
//! that [`crate::corpus::ingest`] reads.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_split, CorpusError, DatasetSplit, IngestOptions, Interaction, RawItemRecord};

/// Raw interactions plus item records, before filtering and re-indexing.
#[derive(Debug, Clone, Default)]
pub struct SynthCorpus {
    pub interactions: Vec<Interaction>,
    pub items: HashMap<u64, RawItemRecord>,
}

impl SynthCorpus {
    pub fn split(&self, name: &str) -> Result<DatasetSplit, CorpusError> {
        let opts = IngestOptions { dataset_name: name.into(), ..Default::default() };
        build_split(&self.interactions, &self.items, &opts)
    }

    /// Writes `interactions.tsv` and `items.tsv` under `dir` and returns both paths.
    pub fn write(&self, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let mut inter = String::from("# user_id\titem_id\trating\ttimestamp\n");
        for r in &self.interactions {
            let _ = writeln!(inter, "{}\t{}\t5\t{}", r.user_id, r.item_id, r.timestamp);
        }
        let mut ids: Vec<&u64> = self.items.keys().collect();
        ids.sort();
        let mut items = String::from("# item_id\tname\tattribute=value|value\n");
        for id in ids {
            let rec = &self.items[id];
            let _ = write!(items, "{id}\t{}", rec.name);
            for (k, vals) in &rec.attributes {
                let _ = write!(items, "\t{k}={}", vals.join("|"));
            }
            items.push('\n');
        }
        let ip = dir.join("interactions.tsv");
        let ap = dir.join("items.tsv");
        fs::write(&ip, inter)?;
        fs::write(&ap, items)?;
        Ok((ip, ap))
    }
}

const GENRES: [&str; 8] = ["Comedy", "Drama", "Action", "Horror", "Romance", "Sci-Fi", "Western", "Animation"];

fn movie_record(raw: u64, genre: usize, year: u32) -> RawItemRecord {
    RawItemRecord {
        name: format!("Movie {raw} ({year})"),
        attributes: vec![
            ("genre".into(), vec![GENRES[genre % GENRES.len()].into()]),
            ("release_year".into(), vec![year.to_string()]),
        ],
    }
}

/// Every user walks the item ring `s, s+1, s+2, ...` (mod `num_items`), so
/// the next item is a deterministic function of the current one. Sequence
/// lengths are drawn from `min_len..=max_len` and never wrap onto themselves.
pub fn planted_successor(num_users: usize, num_items: usize, min_len: usize, max_len: usize, seed: u64) -> SynthCorpus {
    assert!(min_len >= 3 && max_len >= min_len && max_len <= num_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SynthCorpus::default();
    for raw in 1..=num_items as u64 {
        corpus.items.insert(raw, movie_record(raw, raw as usize % 5, 1980 + (raw % 20) as u32));
    }
    for u in 0..num_users {
        let start = rng.random_range(0..num_items);
        let len = rng.random_range(min_len..=max_len);
        for t in 0..len {
            let item = (start + t) % num_items;
            corpus.interactions.push(Interaction {
                user_id: 1000 + u as u64,
                item_id: item as u64 + 1,
                timestamp: 1_000_000 + (t as i64) * 60,
            });
        }
    }
    corpus
}

/// Users each pick one genre and only interact with items of that genre, in
/// random order without repeats. Items are spread round-robin over
/// `num_genres` genres; `release_year` is independent of genre.
pub fn attribute_planted(
    num_users: usize,
    num_items: usize,
    num_genres: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> SynthCorpus {
    assert!(num_genres >= 2 && num_genres <= GENRES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SynthCorpus::default();
    let mut by_genre: Vec<Vec<u64>> = vec![Vec::new(); num_genres];
    for raw in 1..=num_items as u64 {
        let g = (raw as usize - 1) % num_genres;
        by_genre[g].push(raw);
        let year = 1970 + rng.random_range(0..40);
        corpus.items.insert(raw, movie_record(raw, g, year));
    }
    for u in 0..num_users {
        let g = u % num_genres;
        let mut pool = by_genre[g].clone();
        pool.shuffle(&mut rng);
        let len = rng.random_range(min_len..=max_len).min(pool.len());
        for (t, &item) in pool.iter().take(len).enumerate() {
            corpus.interactions.push(Interaction {
                user_id: 5000 + u as u64,
                item_id: item,
                timestamp: 2_000_000 + (t as i64) * 60,
            });
        }
    }
    corpus
}

/// Uniformly random interactions; handy for property tests of filtering.
pub fn random_interactions(num_users: u64, num_items: u64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Interaction> {
    (0..count)
        .map(|_| Interaction {
            user_id: rng.random_range(0..num_users),
            item_id: rng.random_range(0..num_items),
            timestamp: rng.random_range(0..1000),
        })
        .collect()
}
