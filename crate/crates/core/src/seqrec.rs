//! Causal self-attention sequence recommender trained with BPR.
//!
//! The backbone maps a history (oldest first) to one vector per position;
//! the representation of the last position is the user vector, and items
//! are scored by inner product with the shared item embedding table.
//! Embedding row 0 is reserved for padding, so item `i` uses row `i + 1`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{DatasetSplit, UserHistory};
use crate::eval::{ndcg_at_n, recall_at_n};
use crate::nn::{self, apply_mask, Adam, Dropout, EncoderStack, Mat, ParamTensors, Scalar, StackCache, StackShape};

#[derive(Debug, Error)]
pub enum SeqRecError {
    #[error("row {row}: token id {id} out of range (vocabulary has {limit} rows)")]
    IdOutOfRange { row: usize, id: u32, limit: usize },
    #[error("row {row}: empty sequence")]
    EmptyRow { row: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub num_items: usize,
}

impl BackboneConfig {
    pub fn stack_shape(&self) -> StackShape {
        StackShape { dim: self.dim, layers: self.layers, ffn_dim: self.dim }
    }

    fn validate(&self) -> Result<(), SeqRecError> {
        if self.heads != 1 {
            return Err(SeqRecError::Config(format!("only single-head attention is supported (heads={})", self.heads)));
        }
        if self.dim == 0 || self.max_len == 0 || self.num_items == 0 {
            return Err(SeqRecError::Config("dim, max_len and num_items must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone parameters β.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F> {
    pub config: BackboneConfig,
    /// `(num_items + 1) x d`, row 0 is padding.
    pub item_emb: Mat<F>,
    /// `max_len x d`, indexed from the oldest retained position.
    pub pos_emb: Mat<F>,
    pub stack: EncoderStack<F>,
}

pub type BackboneParams = Backbone<f32>;

impl<F: Scalar> ParamTensors<F> for Backbone<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut v = vec![("item_embeddings".to_string(), &self.item_emb), ("positional_embeddings".to_string(), &self.pos_emb)];
        v.extend(self.stack.tensors_prefixed("encoder."));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut v = vec![
            ("item_embeddings".to_string(), &mut self.item_emb),
            ("positional_embeddings".to_string(), &mut self.pos_emb),
        ];
        v.extend(self.stack.tensors_mut_prefixed("encoder."));
        v
    }
}

/// Cached activations of one backbone forward pass.
pub struct BackboneCache<F> {
    items: Vec<usize>,
    input_mask: Option<Vec<F>>,
    stack: StackCache<F>,
}

/// One training sequence: at position `t` the model has seen `inputs[..=t]`
/// and should rank `positives[t]` above `negatives[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub inputs: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl<F: Scalar> Backbone<F> {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let mut item_emb = Mat::xavier(config.num_items + 1, d, rng);
        item_emb.row_mut(0).iter_mut().for_each(|v| *v = F::zero());
        Self {
            config,
            item_emb,
            pos_emb: Mat::xavier(config.max_len, d, rng),
            stack: EncoderStack::init(config.stack_shape(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    pub fn cast<G: Scalar>(&self) -> Backbone<G> {
        Backbone {
            config: self.config,
            item_emb: self.item_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            stack: self.stack.cast(),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    pub fn item_vec(&self, item: usize) -> &[F] {
        self.item_emb.row(item + 1)
    }

    /// Keeps the most recent `max_len` items.
    pub fn truncate<'a>(&self, items: &'a [usize]) -> &'a [usize] {
        &items[items.len().saturating_sub(self.config.max_len)..]
    }

    /// Forward over an already truncated, non-empty item list. Returns one
    /// representation per position.
    pub fn forward(&self, items: &[usize], dropout: &mut Dropout<'_>) -> (Mat<F>, BackboneCache<F>) {
        assert!(!items.is_empty() && items.len() <= self.config.max_len);
        let d = self.dim();
        let mut x = Mat::zeros(items.len(), d);
        for (t, &item) in items.iter().enumerate() {
            let e = self.item_vec(item);
            let p = self.pos_emb.row(t);
            for (o, (&a, &b)) in x.row_mut(t).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        let input_mask = dropout.mask(x.len());
        apply_mask(&mut x, &input_mask);
        let (out, stack) = self.stack.forward(&x, dropout);
        (out, BackboneCache { items: items.to_vec(), input_mask, stack })
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the outputs.
    pub fn backward(&self, d_out: &Mat<F>, cache: &BackboneCache<F>, grads: &mut Backbone<F>) {
        let mut dx = self.stack.backward(d_out, &cache.stack, &mut grads.stack);
        apply_mask(&mut dx, &cache.input_mask);
        for (t, &item) in cache.items.iter().enumerate() {
            let g = dx.row(t);
            for (a, &v) in grads.item_emb.row_mut(item + 1).iter_mut().zip(g) {
                *a = *a + v;
            }
            for (a, &v) in grads.pos_emb.row_mut(t).iter_mut().zip(g) {
                *a = *a + v;
            }
        }
    }

    /// Representation at every position of the (truncated) history.
    pub fn represent_all(&self, history: &[usize]) -> Mat<F> {
        self.forward(self.truncate(history), &mut Dropout::off()).0
    }

    /// User vector: final-layer representation at the last position.
    pub fn represent(&self, history: &[usize]) -> Vec<F> {
        let out = self.represent_all(history);
        out.row(out.rows - 1).to_vec()
    }

    /// φ(u, v): inner product with the item embedding.
    pub fn score(&self, user_vec: &[F], item: usize) -> F {
        nn::dot(user_vec, self.item_vec(item))
    }

    pub fn score_all(&self, user_vec: &[F]) -> Vec<F> {
        (0..self.num_items()).map(|i| self.score(user_vec, i)).collect()
    }

    /// Summed BPR loss over all positions of `ex`. Gradients w.r.t. every
    /// backbone tensor are accumulated into `grads` (unscaled).
    pub fn loss_and_grad(&self, ex: &SequenceExample, grads: &mut Backbone<F>, dropout: &mut Dropout<'_>) -> F {
        let (out, cache) = self.forward(&ex.inputs, dropout);
        let mut d_out = Mat::zeros(out.rows, out.cols);
        let mut loss = F::zero();
        for t in 0..out.rows {
            let h = out.row(t);
            let (p, n) = (ex.positives[t], ex.negatives[t]);
            let diff = self.score(h, p) - self.score(h, n);
            loss = loss + nn::softplus_neg(diff);
            let g = -nn::sigmoid(-diff);
            let (ep, en) = (self.item_vec(p), self.item_vec(n));
            for (k, dv) in d_out.row_mut(t).iter_mut().enumerate() {
                *dv = g * (ep[k] - en[k]);
            }
            for (k, &hv) in h.iter().enumerate() {
                grads.item_emb.data[(p + 1) * self.dim() + k] = grads.item_emb.data[(p + 1) * self.dim() + k] + g * hv;
                grads.item_emb.data[(n + 1) * self.dim() + k] = grads.item_emb.data[(n + 1) * self.dim() + k] - g * hv;
            }
        }
        self.backward(&d_out, &cache, grads);
        loss
    }
}

impl Backbone<f32> {
    pub fn to_checkpoint(&self, dataset: &str) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.set("kind", "backbone");
        c.set("dataset", dataset);
        c.set("d", self.config.dim);
        c.set("layers", self.config.layers);
        c.set("heads", self.config.heads);
        c.set("max_len", self.config.max_len);
        c.set("num_items", self.config.num_items);
        for (name, t) in self.tensors() {
            c.push_mat(&name, t);
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, SeqRecError> {
        Self::from_checkpoint_prefixed(c, "")
    }

    /// Loads backbone tensors stored under `prefix` (used by full fine-tune checkpoints).
    pub fn from_checkpoint_prefixed(c: &Checkpoint, prefix: &str) -> Result<Self, SeqRecError> {
        let config = BackboneConfig {
            dim: c.get_parsed("d")?,
            layers: c.get_parsed("layers")?,
            heads: c.get_parsed("heads")?,
            max_len: c.get_parsed("max_len")?,
            num_items: c.get_parsed("num_items")?,
        };
        config.validate()?;
        let mut b = Backbone::init(config, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in b.tensors_mut() {
            c.load_into(&format!("{prefix}{name}"), t)?;
        }
        Ok(b)
    }
}

/// Left-padded rows of token ids (`item + 1`, 0 = padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub rows: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl SequenceBatch {
    /// Keeps the most recent `max_len` items of each history.
    pub fn from_histories(histories: &[Vec<usize>], max_len: usize) -> Self {
        let mut rows = Vec::with_capacity(histories.len());
        let mut lengths = Vec::with_capacity(histories.len());
        for h in histories {
            let tail = &h[h.len().saturating_sub(max_len)..];
            let mut row = vec![0u32; max_len - tail.len()];
            row.extend(tail.iter().map(|&i| i as u32 + 1));
            rows.push(row);
            lengths.push(tail.len());
        }
        Self { rows, lengths, max_len }
    }
}

/// One user vector per batch row, taken at the last non-padding position.
/// Padding positions are never fed to the encoder.
pub fn encode<F: Scalar>(batch: &SequenceBatch, params: &Backbone<F>) -> Result<Vec<Vec<F>>, SeqRecError> {
    let limit = params.num_items() + 1;
    let mut out = Vec::with_capacity(batch.rows.len());
    for (row, (tokens, &len)) in batch.rows.iter().zip(&batch.lengths).enumerate() {
        if len == 0 {
            return Err(SeqRecError::EmptyRow { row });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= limit) {
            return Err(SeqRecError::IdOutOfRange { row, id, limit });
        }
        let real = &tokens[tokens.len() - len..];
        if let Some(&id) = real.iter().find(|&&id| id == 0) {
            return Err(SeqRecError::IdOutOfRange { row, id, limit });
        }
        let items: Vec<usize> = real.iter().map(|&t| t as usize - 1).collect();
        out.push(params.represent(&items));
    }
    Ok(out)
}

/// `−log σ(pos − neg)` in softplus form.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> f64 {
    nn::softplus_neg(pos_score - neg_score)
}

/// ∂/∂pos of [`bpr_loss`]: `−σ(neg − pos)`.
pub fn bpr_loss_grad_pos(pos_score: f64, neg_score: f64) -> f64 {
    -nn::sigmoid(neg_score - pos_score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub items: Vec<(usize, f32)>,
    /// Fewer than `k` items were available after exclusion.
    pub truncated: bool,
}

/// Sorts scores descending with ascending item id as the tie-break, skipping
/// excluded items.
pub fn rank_scores(scores: &[f32], k: usize, exclude: &BTreeSet<usize>) -> TopK {
    let mut cand: Vec<(usize, f32)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(i, &s)| (i, s))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = cand.len() < k;
    cand.truncate(k);
    TopK { items: cand, truncated }
}

pub fn top_k(params: &BackboneParams, history: &[usize], k: usize, exclude: &BTreeSet<usize>) -> Result<TopK, SeqRecError> {
    if k == 0 {
        return Err(SeqRecError::ZeroK);
    }
    if history.is_empty() {
        return Err(SeqRecError::EmptyRow { row: 0 });
    }
    let u = params.represent(history);
    Ok(rank_scores(&params.score_all(&u), k, exclude))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 1,
            max_len: 50,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            patience: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch={} loss={:.6} val_recall={:.4} val_ndcg={:.4}",
                e.epoch, e.loss, e.val_recall, e.val_ndcg
            );
        }
        s
    }
}

/// Uniform negative that the user never interacted with.
pub(crate) fn sample_negative(rng: &mut ChaCha8Rng, num_items: usize, seen: &BTreeSet<usize>) -> Option<usize> {
    if seen.len() >= num_items {
        return None;
    }
    loop {
        let c = rng.random_range(0..num_items);
        if !seen.contains(&c) {
            return Some(c);
        }
    }
}

/// Builds the next-item example for one user's training sequence, or `None`
/// when the sequence is too short.
pub(crate) fn training_example(
    h: &UserHistory,
    max_len: usize,
    num_items: usize,
    rng: &mut ChaCha8Rng,
) -> Option<SequenceExample> {
    let seq = &h.sequence[h.sequence.len().saturating_sub(max_len + 1)..];
    if seq.len() < 2 {
        return None;
    }
    let seen = h.all_items();
    let inputs = seq[..seq.len() - 1].to_vec();
    let positives = seq[1..].to_vec();
    let mut negatives = Vec::with_capacity(positives.len());
    for _ in &positives {
        negatives.push(sample_negative(rng, num_items, &seen)?);
    }
    Some(SequenceExample { inputs, positives, negatives })
}

/// Recall@10 / NDCG@10 of `user_vec_fn` on the validation items.
pub(crate) fn validate_with<G>(split: &DatasetSplit, mut scores_for: G) -> (f64, f64)
where
    G: FnMut(&UserHistory) -> Vec<f32>,
{
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    let mut n = 0usize;
    for h in &split.histories {
        if h.sequence.is_empty() {
            continue;
        }
        let exclude: BTreeSet<usize> = h.sequence.iter().copied().collect();
        let ranked: Vec<usize> = rank_scores(&scores_for(h), 10, &exclude).items.into_iter().map(|(i, _)| i).collect();
        recall += recall_at_n(&ranked, h.validation_item, 10);
        ndcg += ndcg_at_n(&ranked, h.validation_item, 10);
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (recall / n as f64, ndcg / n as f64)
    }
}

/// Pre-trains the backbone with BPR on next-item pairs, early-stopping on
/// validation NDCG@10. Returns the best-epoch parameters.
pub fn train_backbone(split: &DatasetSplit, cfg: &TrainConfig) -> Result<(BackboneParams, TrainLog), SeqRecError> {
    let config = BackboneConfig {
        dim: cfg.dim,
        layers: cfg.layers,
        heads: cfg.heads,
        max_len: cfg.max_len,
        num_items: split.catalog.len(),
    };
    config.validate()?;
    if cfg.batch_size == 0 {
        return Err(SeqRecError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: Backbone<f32> = Backbone::init(config, &mut rng);
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }

    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut grads = params.zeros_like();
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..split.histories.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_pairs = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            grads.zero_all();
            let mut batch_loss = 0.0f64;
            let mut pairs = 0usize;
            for &u in chunk {
                let Some(ex) = training_example(&split.histories[u], cfg.max_len, config.num_items, &mut rng) else {
                    continue;
                };
                let mut dropout = Dropout { rate: cfg.dropout, rng: Some(&mut rng) };
                batch_loss += params.loss_and_grad(&ex, &mut grads, &mut dropout) as f64;
                pairs += ex.positives.len();
            }
            if pairs == 0 {
                continue;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(SeqRecError::Divergence { epoch, step, loss: batch_loss });
            }
            let inv = 1.0 / pairs as f32;
            for (_, g) in grads.tensors_mut() {
                g.scale(inv);
            }
            let p: Vec<&mut Mat<f32>> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            let g: Vec<&Mat<f32>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
            adam.step(p, g);
            epoch_loss += batch_loss;
            epoch_pairs += pairs;
        }
        let mean_loss = if epoch_pairs > 0 { epoch_loss / epoch_pairs as f64 } else { 0.0 };
        if !params.all_finite() {
            return Err(SeqRecError::Divergence { epoch, step, loss: mean_loss });
        }
        let (val_recall, val_ndcg) = validate_with(split, |h| {
            let u = params.represent(&h.sequence);
            params.score_all(&u)
        });
        log.epochs.push(EpochRecord { epoch, loss: mean_loss, val_recall, val_ndcg });
        log::info!("pretrain epoch={epoch} loss={mean_loss:.6} val_ndcg={val_ndcg:.4}");
        if val_ndcg > best.0 {
            best = (val_ndcg, params.clone());
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dim: usize, layers: usize, items: usize, seed: u64) -> Backbone<f64> {
        let cfg = BackboneConfig { dim, layers, heads: 1, max_len: 8, num_items: items };
        Backbone::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn bpr_values() {
        assert!((bpr_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bpr_loss(20.0, 0.0);
        assert!((v - 2.061153618190204e-9).abs() < 1e-15, "{v}");
    }

    #[test]
    fn bpr_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p: f64 = rng.random_range(-5.0..5.0);
            let n: f64 = rng.random_range(-5.0..5.0);
            let h = 1e-6;
            let fd = (bpr_loss(p + h, n) - bpr_loss(p - h, n)) / (2.0 * h);
            assert!((fd - bpr_loss_grad_pos(p, n)).abs() < 1e-6);
        }
    }

    #[test]
    fn score_basis_vectors() {
        let mut b = toy(3, 1, 4, 1);
        b.item_emb.row_mut(2).copy_from_slice(&[1.0, 0.0, 0.0]);
        assert_eq!(b.score(&[1.0, 0.0, 0.0], 1), 1.0);
        assert!(b.score_all(&[0.0, 0.0, 0.0]).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_item_with_zero_blocks_is_normed_embedding() {
        // d = 2, one layer; all attention/FFN weights zero so only the residual path remains
        let mut b = toy(2, 1, 3, 5);
        for (name, t) in b.stack.tensors_mut_prefixed("") {
            if !name.contains("gain") {
                t.fill_zero();
            }
        }
        b.stack.final_gain.data = vec![2.0, 0.5];
        b.stack.final_bias.data = vec![0.1, -0.1];
        b.item_emb.row_mut(2).copy_from_slice(&[0.7, -0.2]);
        b.pos_emb.row_mut(0).copy_from_slice(&[0.1, 0.4]);
        // x = [0.8, 0.2]: mean 0.5, var 0.09, xhat = ±0.3/sqrt(0.09 + eps)
        let xh = 0.3 / (0.09f64 + 1e-5).sqrt();
        let expected = [2.0 * xh + 0.1, 0.5 * -xh - 0.1];
        let u = b.represent(&[1]);
        assert!((u[0] - expected[0]).abs() < 1e-12 && (u[1] - expected[1]).abs() < 1e-12, "{u:?}");
    }

    #[test]
    fn appending_does_not_change_earlier_positions() {
        let b = toy(4, 2, 10, 2);
        let short = b.represent_all(&[3, 1, 4]);
        let long = b.represent_all(&[3, 1, 4, 9]);
        for r in 0..3 {
            assert_eq!(short.row(r), long.row(r));
        }
    }

    #[test]
    fn padding_and_determinism() {
        let b = toy(4, 2, 10, 3).cast::<f32>();
        let batch = SequenceBatch::from_histories(&[vec![2, 5, 7], vec![1]], 6);
        assert_eq!(batch.rows[0], vec![0, 0, 0, 3, 6, 8]);
        let a = encode(&batch, &b).unwrap();
        let again = encode(&batch, &b).unwrap();
        assert_eq!(a, again);
        let wider = SequenceBatch::from_histories(&[vec![2, 5, 7]], 8);
        assert_eq!(encode(&wider, &b).unwrap()[0], a[0]);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let b = toy(4, 1, 5, 3);
        let batch = SequenceBatch { rows: vec![vec![0, 1], vec![0, 9]], lengths: vec![1, 1], max_len: 2 };
        match encode(&batch, &b) {
            Err(SeqRecError::IdOutOfRange { row: 1, id: 9, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn top_k_tie_break_and_exclusion() {
        let scores = [0.5f32, 0.9, 0.9, 0.1];
        let t = rank_scores(&scores, 2, &BTreeSet::new());
        assert_eq!(t.items.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        let ex: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let t = rank_scores(&scores, 1, &ex);
        assert_eq!(t.items, vec![(3, 0.1)]);
        assert!(!t.truncated);
        let t = rank_scores(&scores, 3, &ex);
        assert!(t.truncated);
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = toy(4, 2, 6, 8).cast::<f32>();
        let c = b.to_checkpoint("toy");
        let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, b);
    }
}
