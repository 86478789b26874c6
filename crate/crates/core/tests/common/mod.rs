//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use toolrec::agent::{run_episode, AgentConfig};
use toolrec::attrtool::{fine_tune, AttrEncoder, AttributeSequence, AttributeVocab, FineTuneConfig, FineTuneMode, RetrievalTool};
use toolrec::corpus::{DatasetSplit, Interaction};
use toolrec::eval::recall_at_n;
use toolrec::llm::{ChatBackend, ChatTurn, LlmError};
use toolrec::nn::{Dropout, ParamTensors};
use toolrec::seqrec::{rank_scores, top_k, train_backbone, Backbone, BackboneConfig, BackboneParams, SequenceExample, TrainConfig, TrainLog};
use toolrec::synth;
use toolrec::tools::{CandidateList, Templates, ToolRegistry};

/// Small catalog with genre, release_year, and actor attributes, an
/// init-only backbone, and init-only genre and release_year tools.
pub struct World {
    pub split: DatasetSplit,
    pub registry: ToolRegistry,
}

pub fn world(seed: u64) -> World {
    let mut split = synth::attribute_planted(40, 36, 3, 5, 9, seed).split("synth-movies").expect("fixture split");
    for i in 0..split.catalog.len() {
        split.catalog.set_attribute("actor", i, vec![format!("Actor {}", i % 7)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BackboneConfig { dim: 8, layers: 1, heads: 1, max_len: 20, num_items: split.catalog.len() };
    let backbone = Arc::new(BackboneParams::init(cfg, &mut rng));
    let tools = ["genre", "release_year"]
        .iter()
        .map(|a| {
            let vocab = AttributeVocab::from_catalog(&split.catalog, a);
            RetrievalTool::new(AttrEncoder::init(a, vocab, 8, 1, 20, &mut rng), backbone.clone(), None)
        })
        .collect();
    let registry =
        ToolRegistry::new(Arc::new(split.catalog.clone()), backbone, tools, Templates::default()).expect("fixture registry");
    World { split, registry }
}

/// The four-step episode: two retrievals, a rank over their union, Finish.
pub fn four_step_script(w: &World, user: usize) -> (String, Vec<usize>) {
    let h = w.split.history(user).unwrap();
    let hist = h.test_input();
    let mut exclude: BTreeSet<usize> = hist.iter().copied().collect();
    let g: CandidateList = w.registry.run_retrieval("genre", &hist, 5, 1, &exclude).unwrap();
    exclude.extend(g.ids());
    let y: CandidateList = w.registry.run_retrieval("release_year", &hist, 3, 2, &exclude).unwrap();
    let (g, y) = (g.ids(), y.ids());
    let ranked = [y[0], g[2], g[0], y[1]];
    let name = |i: usize| w.split.catalog.name(i).to_string();
    let reply: Vec<String> = ranked.iter().enumerate().map(|(k, &i)| format!("{}. {}", k + 1, name(i))).collect();
    let script = format!(
        "=== reply\nThought: The user keeps returning to one genre, so I start from genre.\nAction: Retrieval[genre, 5]\n\
         === reply\nThought: Release year may narrow this down.\nAction: Retrieval[release_year, 3]\n\
         === reply\nThought: Rank the gathered candidates with the actor attribute.\nAction: Rank[actor, 4]\n\
         === reply match=Please rank\n{}\n\
         === reply\nThought: The ranked list looks right.\nAction: Finish\n",
        reply.join("\n")
    );
    // finish order: latest round first, then by confidence
    let expected = [ranked.to_vec(), vec![y[2]], vec![g[1], g[3], g[4]]].concat();
    (script, expected)
}

/// 12 users and 12 items. User 12 holds 9 interactions, so under k=10 it goes,
/// which takes items 11 and 12 below 10 and pulls users 1..=9 back to 10.
pub fn cascade_fixture() -> Vec<Interaction> {
    let mut r = Vec::new();
    let mut t = 0;
    let mut push = |u, i| {
        t += 1;
        r.push(Interaction { user_id: u, item_id: i, timestamp: t });
    };
    for u in 1..=11 {
        for i in 1..=10 {
            push(u, i);
        }
    }
    for u in 1..=9 {
        push(u, 11);
        push(u, 12);
    }
    for i in [11, 12, 1, 2, 3, 4, 5, 6, 7] {
        push(12, i);
    }
    r
}

/// Reference k-core by peeling: drop one violating user or item at a time,
/// recounting degrees from scratch, until none violates its threshold.
pub fn brute_kcore(records: &[Interaction], user_min: usize, item_min: usize) -> Vec<Interaction> {
    let mut kept: Vec<Interaction> = records.to_vec();
    loop {
        let user_deg = |u: u64, k: &[Interaction]| k.iter().filter(|r| r.user_id == u).count();
        let item_deg = |i: u64, k: &[Interaction]| k.iter().filter(|r| r.item_id == i).count();
        let bad_user = kept.iter().map(|r| r.user_id).find(|&u| user_deg(u, &kept) < user_min);
        if let Some(u) = bad_user {
            kept.retain(|r| r.user_id != u);
            continue;
        }
        let bad_item = kept.iter().map(|r| r.item_id).find(|&i| item_deg(i, &kept) < item_min);
        match bad_item {
            Some(i) => kept.retain(|r| r.item_id != i),
            None => return kept,
        }
    }
}

/// NDCG@n by direct search for the target's position.
pub fn brute_ndcg(ranked: &[usize], target: usize, n: usize) -> f64 {
    for (pos, &item) in ranked.iter().enumerate() {
        if pos >= n {
            break;
        }
        if item == target {
            return 1.0 / ((pos + 2) as f64).log2();
        }
    }
    0.0
}

pub fn brute_recall(ranked: &[usize], target: usize, n: usize) -> f64 {
    if ranked.iter().take(n).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

/// Most frequent genre in a history; ties go to the smallest token.
pub fn majority_genre(split: &DatasetSplit, history: &[usize]) -> String {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &i in history {
        for g in split.catalog.values("genre", i) {
            *counts.entry(g.as_str()).or_default() += 1;
        }
    }
    let mut best: Vec<(&str, usize)> = counts.into_iter().collect();
    best.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    best.first().map(|b| b.0.to_string()).unwrap_or_default()
}

/// Share of recommended items whose genre equals the user's majority genre.
pub fn genre_match_rate(split: &DatasetSplit, lists: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (history, recs) in lists {
        let g = majority_genre(split, history);
        for &i in recs {
            total += 1;
            if split.catalog.values("genre", i).contains(&g) {
                hits += 1;
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Soundness of a final list: catalog-valid, history-free, duplicate-free.
pub fn sound(split: &DatasetSplit, history: &[usize], list: &[usize], n: usize) -> Result<(), String> {
    let hist: HashSet<usize> = history.iter().copied().collect();
    let mut seen = BTreeSet::new();
    if list.len() > n {
        return Err(format!("list longer than {n}"));
    }
    for &i in list {
        if i >= split.catalog.len() {
            return Err(format!("item {i} outside catalog"));
        }
        if hist.contains(&i) {
            return Err(format!("item {i} is in the history"));
        }
        if !seen.insert(i) {
            return Err(format!("item {i} repeated"));
        }
    }
    Ok(())
}

pub fn planted_config() -> TrainConfig {
    TrainConfig { dim: 32, layers: 2, lr: 5e-3, batch_size: 32, epochs: 30, patience: 30, ..TrainConfig::default() }
}

/// Held-out Recall@10 on the test targets, history excluded.
pub fn test_recall(split: &DatasetSplit, params: &BackboneParams) -> f64 {
    let mut total = 0.0;
    for h in &split.histories {
        let input = h.test_input();
        let exclude: BTreeSet<usize> = input.iter().copied().collect();
        let ranked: Vec<usize> = top_k(params, &input, 10, &exclude).unwrap().items.iter().map(|x| x.0).collect();
        total += recall_at_n(&ranked, h.target, 10);
    }
    total / split.histories.len() as f64
}

/// Trailing three-epoch mean.
pub fn smoothed(losses: &[f64]) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let w = &losses[i.saturating_sub(2)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// Trains on the planted-successor corpus (200 users, 50 items).
pub fn planted_run() -> (f64, TrainLog) {
    let split = synth::planted_successor(200, 50, 8, 20, 1).split("planted").unwrap();
    let (params, log) = train_backbone(&split, &planted_config()).unwrap();
    (test_recall(&split, &params), log)
}

/// Steering fixture: 300 users, 400 items, 4 genres, 5..=10 interactions.
pub fn steering_split(seed: u64) -> DatasetSplit {
    synth::attribute_planted(300, 400, 4, 5, 10, seed).split("steer").unwrap()
}

pub fn steering_backbone(split: &DatasetSplit) -> BackboneParams {
    let cfg = TrainConfig { dim: 32, lr: 5e-3, batch_size: 64, epochs: 40, seed: 7, ..TrainConfig::default() };
    train_backbone(split, &cfg).unwrap().0
}

pub fn steering_finetune() -> FineTuneConfig {
    FineTuneConfig { lr: 5e-3, batch_size: 64, epochs: 40, ..FineTuneConfig::default() }
}

fn top10_lists(split: &DatasetSplit, mut rec: impl FnMut(&[usize], &BTreeSet<usize>) -> Vec<usize>) -> Vec<(Vec<usize>, Vec<usize>)> {
    split
        .histories
        .iter()
        .map(|h| {
            let input = h.test_input();
            let exclude: BTreeSet<usize> = input.iter().copied().collect();
            let r = rec(&input, &exclude);
            (input, r)
        })
        .collect()
}

/// Top-10 genre-match rates (backbone, genre tool) pooled over `seeds`.
pub fn steering_rates(seeds: impl IntoIterator<Item = u64>) -> (f64, f64) {
    let mut base_lists = Vec::new();
    let mut attr_lists = Vec::new();
    let mut splits = Vec::new();
    for seed in seeds {
        let split = steering_split(seed);
        let backbone = steering_backbone(&split);
        let tuned = fine_tune(&backbone, &split, "genre", &steering_finetune()).unwrap();
        let tool = RetrievalTool::new(tuned.encoder, Arc::new(backbone.clone()), None);
        let base = top10_lists(&split, |input, ex| top_k(&backbone, input, 10, ex).unwrap().items.iter().map(|x| x.0).collect());
        let attr = top10_lists(&split, |input, ex| {
            let s = tool.scores(&split.catalog, input).unwrap();
            rank_scores(&s, 10, ex).items.iter().map(|x| x.0).collect()
        });
        base_lists.push(base);
        attr_lists.push(attr);
        splits.push(split);
    }
    let pooled = |lists: &[Vec<(Vec<usize>, Vec<usize>)>]| {
        let mut hits = 0.0;
        let mut total = 0.0;
        for (split, l) in splits.iter().zip(lists) {
            let n: usize = l.iter().map(|x| x.1.len()).sum();
            hits += genre_match_rate(split, l) * n as f64;
            total += n as f64;
        }
        hits / total
    };
    (pooled(&base_lists), pooled(&attr_lists))
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Randomized policy: valid, malformed, and out-of-range actions, rank and
/// Finish replies mixing catalog names, history names, ids, and fabrications.
pub struct RandomPolicy {
    rng: Mutex<ChaCha8Rng>,
    names: Vec<String>,
    history: Vec<String>,
    rank_system: String,
}

impl RandomPolicy {
    fn name_lines(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..rng.random_range(0..12))
            .map(|k| match rng.random_range(0..5) {
                0 => format!("{}. {}", k + 1, self.names.choose(rng).unwrap()),
                1 => format!("{}. {}", k + 1, self.history.choose(rng).unwrap()),
                2 => format!("{}. The Imaginary Film {}", k + 1, rng.random_range(0..50)),
                3 => format!("{} | {}", rng.random_range(0..60), self.names.choose(rng).unwrap()),
                _ => self.names.choose(rng).unwrap().to_lowercase(),
            })
            .collect()
    }
}

impl ChatBackend for RandomPolicy {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, LlmError> {
        let mut rng = self.rng.lock().unwrap();
        if rng.random_bool(0.01) {
            return Err(LlmError::BackendUnavailable { attempts: 1, reason: "simulated".into() });
        }
        if turns[0].content == self.rank_system {
            return Ok(self.name_lines(&mut rng).join("\n"));
        }
        let attr = *["genre", "release_year", "Release Year", "actor", "GENRE", "mood"].choose(&mut *rng).unwrap();
        let k: i64 = rng.random_range(-3..30);
        let action = match rng.random_range(0..8) {
            0 | 1 => format!("Retrieval[{attr}, {k}]"),
            2 => format!("Retrieval[{attr}]"),
            3 => format!("Rank[{attr}, {k}]"),
            4 => format!("Finish[{}]", rng.random_range(0..25)),
            5 => "Finish".into(),
            6 => format!("Search[{attr}]"),
            _ => "no idea".into(),
        };
        let mut reply = format!("Thought: trying {attr}\nAction: {action}");
        if action.starts_with("Finish") {
            reply.push('\n');
            reply.push_str(&self.name_lines(&mut rng).join("\n"));
        }
        Ok(reply)
    }
}

/// Runs `count` randomized episodes and checks every final and stored list
/// for soundness; returns the termination reasons seen.
pub fn random_episodes(count: u64) -> Result<BTreeSet<String>, String> {
    let w = world(6);
    let cfg = AgentConfig::default();
    let names: Vec<String> = (0..w.split.catalog.len()).map(|i| w.split.catalog.name(i).to_string()).collect();
    let mut terminations = BTreeSet::new();
    for ep in 0..count {
        let h = &w.split.histories[ep as usize % w.split.histories.len()];
        let hist = h.test_input();
        let policy = RandomPolicy {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(ep)),
            names: names.clone(),
            history: hist.iter().map(|&i| names[i].clone()).collect(),
            rank_system: w.registry.templates.rank_system_prompt(),
        };
        let r = run_episode(h, &w.registry, &policy, &cfg).map_err(|e| format!("episode {ep}: {e}"))?;
        sound(&w.split, &hist, &r.final_ids(), cfg.n).map_err(|e| format!("episode {ep}: {e}"))?;
        if r.rounds > cfg.max_rounds {
            return Err(format!("episode {ep}: {} rounds", r.rounds));
        }
        for s in &r.trace.steps {
            sound(&w.split, &hist, &s.list, 20).map_err(|e| format!("episode {ep} round {}: {e}", s.round))?;
        }
        terminations.insert(r.termination.to_string());
    }
    Ok(terminations)
}

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

struct Toy {
    backbone: Backbone<f64>,
    encoder: AttrEncoder<f64>,
    ex: SequenceExample,
    seq: AttributeSequence,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BackboneConfig { dim: 4, layers: 1, heads: 1, max_len: 8, num_items: 10 };
    let backbone = BackboneParams::init(cfg, &mut rng).cast::<f64>();
    let vocab = AttributeVocab::new(["comedy", "drama", "horror"].map(String::from));
    let mut encoder = AttrEncoder::<f32>::init("genre", vocab, 4, 1, 8, &mut rng).cast::<f64>();
    // move away from the identity-block start so every path carries gradient
    for (_, t) in encoder.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let ex = SequenceExample { inputs: vec![3, 7, 1, 9, 4], positives: vec![7, 1, 9, 4, 2], negatives: vec![5, 0, 8, 6, 6] };
    let seq = AttributeSequence { positions: vec![vec![1], vec![2, 3], vec![0], vec![3], vec![1, 2]] };
    Toy { backbone, encoder, ex, seq }
}

fn loss(t: &Toy, enc: &AttrEncoder<f64>, bb: &Backbone<f64>, mode: FineTuneMode) -> f64 {
    let mut g = enc.zeros_like();
    let mut bg = bb.zeros_like();
    let bg = (mode == FineTuneMode::Full).then_some(&mut bg);
    enc.loss_and_grad(bb, &t.ex, &t.seq, mode, &mut g, bg, &mut Dropout::off())
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    // absolute floor for tensors whose true gradient is zero
    diff / scale.max(1e-7)
}

/// Finite-difference check of the attribute tool in f64 (d=4, one layer,
/// 10 items): per-tensor relative error of the encoder gradients, plus the
/// backbone gradients in full mode.
pub fn gradcheck(mode: FineTuneMode) -> Vec<(String, f64)> {
    let t = toy(5);
    let mut ga = t.encoder.zeros_like();
    let mut gb = t.backbone.zeros_like();
    let gb_opt = (mode == FineTuneMode::Full).then_some(&mut gb);
    t.encoder.loss_and_grad(&t.backbone, &t.ex, &t.seq, mode, &mut ga, gb_opt, &mut Dropout::off());

    let mut out = Vec::new();
    let analytic: Vec<(String, Vec<f64>)> = ga.tensors().into_iter().map(|(n, m)| (n, m.data.clone())).collect();
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut num = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut plus = t.encoder.clone();
            plus.tensors_mut()[ti].1.data[j] += GRAD_H;
            let mut minus = t.encoder.clone();
            minus.tensors_mut()[ti].1.data[j] -= GRAD_H;
            num[j] = (loss(&t, &plus, &t.backbone, mode) - loss(&t, &minus, &t.backbone, mode)) / (2.0 * GRAD_H);
        }
        out.push((name.clone(), rel_err(a, &num)));
    }
    if mode == FineTuneMode::Full {
        let analytic: Vec<(String, Vec<f64>)> = gb.tensors().into_iter().map(|(n, m)| (n, m.data.clone())).collect();
        for (ti, (name, a)) in analytic.iter().enumerate() {
            let mut num = vec![0.0; a.len()];
            for j in 0..a.len() {
                let mut plus = t.backbone.clone();
                plus.tensors_mut()[ti].1.data[j] += GRAD_H;
                let mut minus = t.backbone.clone();
                minus.tensors_mut()[ti].1.data[j] -= GRAD_H;
                num[j] = (loss(&t, &t.encoder, &plus, mode) - loss(&t, &t.encoder, &minus, mode)) / (2.0 * GRAD_H);
            }
            out.push((format!("backbone.{name}"), rel_err(a, &num)));
        }
    }
    out
}

