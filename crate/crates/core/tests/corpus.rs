mod common;

use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use toolrec::corpus::{self, build_split, kcore_filter, DatasetStats, IngestOptions, Interaction, RawItemRecord};

fn rec(user_id: u64, item_id: u64, timestamp: i64) -> Interaction {
    Interaction { user_id, item_id, timestamp }
}

fn opts(k: usize) -> IngestOptions {
    IngestOptions { dataset_name: "fixture".into(), k_core: k, ..Default::default() }
}

#[test]
fn ml1m_sparsity() {
    let s = DatasetStats::from_counts(6041, 3884, 1_000_209);
    assert!((s.sparsity_percent - 95.74).abs() <= 0.01, "{}", s.sparsity_percent);
    assert!((DatasetStats::from_counts(2, 2, 2).sparsity_percent - 50.0).abs() < 1e-12);
}

#[test]
fn three_interactions_without_filtering() {
    let split = build_split(&[rec(7, 30, 3), rec(7, 10, 1), rec(7, 20, 2)], &HashMap::new(), &opts(0)).unwrap();
    let h = &split.histories[0];
    let raw = |i: usize| split.catalog.raw_id(i);
    assert_eq!(h.sequence.iter().map(|&i| raw(i)).collect::<Vec<_>>(), vec![10]);
    assert_eq!((raw(h.validation_item), raw(h.target)), (20, 30));
}

#[test]
fn cascade_fixture_matches_oracle() {
    let records = common::cascade_fixture();
    let got = kcore_filter(&records, 10);
    assert_eq!(got, common::brute_kcore(&records, 10, 10));
    let users: HashSet<u64> = got.iter().map(|r| r.user_id).collect();
    let items: HashSet<u64> = got.iter().map(|r| r.item_id).collect();
    assert_eq!((users.len(), items.len(), got.len()), (11, 10, 110));
    assert!(!users.contains(&12) && !items.contains(&11) && !items.contains(&12));

    let split = build_split(&records, &HashMap::new(), &opts(10)).unwrap();
    assert_eq!((split.stats.num_users, split.stats.num_items, split.stats.num_interactions), (11, 10, 110));
}

#[test]
fn empty_after_filtering_is_an_error() {
    let err = build_split(&[rec(1, 1, 1), rec(1, 2, 2), rec(1, 3, 3)], &HashMap::new(), &opts(5)).unwrap_err();
    assert!(err.to_string().contains("empty dataset"), "{err}");
}

fn arb_records() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((1u64..14, 1u64..14, 0i64..1000), 0..160)
        .prop_map(|v| v.into_iter().map(|(u, i, t)| rec(u, i, t)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kcore_matches_peeling_oracle(records in arb_records(), k in 0usize..7) {
        let got = kcore_filter(&records, k);
        prop_assert_eq!(&got, &common::brute_kcore(&records, k, k));
        prop_assert_eq!(kcore_filter(&got, k), got);
    }

    #[test]
    fn split_invariants(records in arb_records(), k in 0usize..5) {
        let mut pairs = HashSet::new();
        let records: Vec<Interaction> = records.into_iter().filter(|r| pairs.insert((r.user_id, r.item_id))).collect();
        let items: HashMap<u64, RawItemRecord> = HashMap::new();
        let Ok(split) = build_split(&records, &items, &opts(k)) else { return Ok(()); };
        let ts: HashMap<(u64, u64), i64> = records.iter().map(|r| ((r.user_id, r.item_id), r.timestamp)).collect();
        let min_user = k.max(3);
        let mut item_deg: HashMap<usize, usize> = HashMap::new();
        for h in &split.histories {
            prop_assert!(!h.sequence.is_empty());
            prop_assert!(h.sequence.len() + 2 >= min_user);
            let all: Vec<usize> = h.sequence.iter().copied().chain([h.validation_item, h.target]).collect();
            for &i in &all {
                *item_deg.entry(i).or_default() += 1;
            }
            let t = |i: usize| ts[&(h.raw_user_id, split.catalog.raw_id(i))];
            prop_assert!(t(h.target) >= t(h.validation_item));
            for w in h.sequence.windows(2) {
                prop_assert!(t(w[1]) >= t(w[0]));
            }
            for &i in &h.sequence {
                prop_assert!(t(h.validation_item) >= t(i));
            }
        }
        for i in 0..split.catalog.len() {
            prop_assert!(item_deg.get(&i).copied().unwrap_or(0) >= k);
            prop_assert_eq!(split.catalog.id_of_raw(split.catalog.raw_id(i)), Some(i));
        }
        let recount = corpus::compute_stats(&split);
        prop_assert_eq!(recount, split.stats);
    }
}

#[test]
fn split_round_trips_through_disk() {
    let corpus = toolrec::synth::attribute_planted(30, 24, 3, 5, 8, 3);
    let split = corpus.split("rt").unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus::save_split(&split, dir.path()).unwrap();
    assert_eq!(corpus::load_split(dir.path()).unwrap(), split);
}
