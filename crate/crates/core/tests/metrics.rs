mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toolrec::eval::{mean_std, ndcg_at_n, recall_at_n};

#[test]
fn trivial_examples() {
    assert_eq!(ndcg_at_n(&[7, 1, 2], 7, 10), 1.0);
    assert_eq!(recall_at_n(&[7, 1, 2], 7, 10), 1.0);
    assert!((ndcg_at_n(&[1, 7, 2], 7, 10) - 1.0 / 3f64.log2()).abs() < 1e-15);
    assert_eq!(ndcg_at_n(&[1, 2, 3], 7, 10), 0.0);
    assert_eq!(recall_at_n(&[1, 2, 3], 7, 10), 0.0);
}

#[test]
fn random_cases_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let pool = rng.random_range(1..60);
        let mut items: Vec<usize> = (0..pool).collect();
        items.shuffle(&mut rng);
        items.truncate(rng.random_range(0..=pool));
        let target = rng.random_range(0..pool + 5);
        let n = rng.random_range(1..25);
        assert_eq!(ndcg_at_n(&items, target, n), common::brute_ndcg(&items, target, n));
        assert_eq!(recall_at_n(&items, target, n), common::brute_recall(&items, target, n));
    }
}

#[test]
fn sample_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!((m, s), (2.0, 1.0));
}
