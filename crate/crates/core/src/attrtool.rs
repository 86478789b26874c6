//! Attribute-oriented retrieval tools.
//!
//! The pre-trained backbone stays frozen. Each tool adds an attribute
//! encoder over the item-aligned attribute token sequence and a dense fusion
//! layer `u = [attr ‖ behavior] · W + b`; only those parameters are trained,
//! with the same BPR objective and the backbone's item embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{normalize_attribute_value, DatasetSplit, ItemCatalog};
use crate::nn::{self, apply_mask, stack_flops, Adam, Dropout, EncoderStack, Mat, ParamTensors, Scalar, StackCache, StackShape};
use crate::seqrec::{self, rank_scores, Backbone, BackboneCache, BackboneParams, SeqRecError, SequenceExample};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum AttrToolError {
    #[error("unknown attribute `{name}`; available: {}", available.join(", "))]
    UnknownAttribute { name: String, available: Vec<String> },
    #[error("k={k} outside 1..={max}")]
    BadK { k: usize, max: usize },
    #[error("empty history")]
    EmptyHistory,
    #[error("word vectors {path}:{line}: {reason}")]
    WordVectors { path: PathBuf, line: usize, reason: String },
    #[error("fine-tuning diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint is not an attribute tool (kind = `{0}`)")]
    WrongKind(String),
    #[error(transparent)]
    SeqRec(#[from] SeqRecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Attribute vocabulary; token 0 is the learned unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl AttributeVocab {
    pub fn new(values: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::from([(UNK_TOKEN.to_string(), 0)]);
        for v in values {
            let v = normalize_attribute_value(&v);
            if !index.contains_key(&v) {
                index.insert(v.clone(), tokens.len());
                tokens.push(v);
            }
        }
        Self { tokens, index }
    }

    pub fn from_catalog(catalog: &ItemCatalog, attribute: &str) -> Self {
        Self::new(catalog.vocabulary(attribute))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, value: &str) -> usize {
        self.index.get(value).copied().unwrap_or(0)
    }
}

/// Attribute tokens aligned one-to-one with a history. A multi-valued
/// position holds every value; the encoder embeds it as their mean.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSequence {
    pub positions: Vec<Vec<usize>>,
}

impl AttributeSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Most recent `max_len` positions, matching the backbone's truncation.
    pub fn truncated(&self, max_len: usize) -> AttributeSequence {
        AttributeSequence { positions: self.positions[self.positions.len().saturating_sub(max_len)..].to_vec() }
    }
}

fn unknown_attribute(catalog: &ItemCatalog, name: &str) -> AttrToolError {
    AttrToolError::UnknownAttribute {
        name: name.to_string(),
        available: catalog.attribute_names().iter().map(|s| s.to_string()).collect(),
    }
}

pub fn build_attribute_sequence(
    history: &[usize],
    attribute: &str,
    catalog: &ItemCatalog,
    vocab: &AttributeVocab,
) -> Result<AttributeSequence, AttrToolError> {
    if !catalog.has_attribute(attribute) {
        return Err(unknown_attribute(catalog, attribute));
    }
    let positions = history
        .iter()
        .map(|&item| {
            let vals = catalog.values(attribute, item);
            if vals.is_empty() {
                vec![0]
            } else {
                vals.iter().map(|v| vocab.id(v)).collect()
            }
        })
        .collect();
    Ok(AttributeSequence { positions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    /// Backbone frozen; only attribute encoder and fusion train.
    Frozen,
    /// Backbone trained jointly (the costly reference configuration).
    Full,
}

impl FineTuneMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FineTuneMode::Frozen => "frozen",
            FineTuneMode::Full => "full",
        }
    }
}

/// Attribute encoder γ plus fusion θ for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrEncoder<F> {
    pub attribute: String,
    pub vocab: AttributeVocab,
    pub token_emb: Mat<F>,
    pub pos_emb: Mat<F>,
    pub stack: EncoderStack<F>,
    /// `2d x d`; rows `0..d` read the attribute half, rows `d..2d` the behavior half.
    pub fusion_w: Mat<F>,
    pub fusion_b: Mat<F>,
}

pub type AttrEncoderParams = AttrEncoder<f32>;

impl<F: Scalar> ParamTensors<F> for AttrEncoder<F> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut v = vec![
            ("attr.token_embeddings".to_string(), &self.token_emb),
            ("attr.positional_embeddings".to_string(), &self.pos_emb),
        ];
        v.extend(self.stack.tensors_prefixed("attr.encoder."));
        v.push(("fusion.weight".to_string(), &self.fusion_w));
        v.push(("fusion.bias".to_string(), &self.fusion_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut v = vec![
            ("attr.token_embeddings".to_string(), &mut self.token_emb),
            ("attr.positional_embeddings".to_string(), &mut self.pos_emb),
        ];
        v.extend(self.stack.tensors_mut_prefixed("attr.encoder."));
        v.push(("fusion.weight".to_string(), &mut self.fusion_w));
        v.push(("fusion.bias".to_string(), &mut self.fusion_b));
        v
    }
}

/// `[attr ‖ behavior] · W + b` with identity activation.
pub fn fuse<F: Scalar>(behavior: &[F], attr: &[F], params: &AttrEncoder<F>) -> Vec<F> {
    let d = params.fusion_b.cols;
    assert_eq!(behavior.len(), d);
    assert_eq!(attr.len(), d);
    let mut u = params.fusion_b.data.clone();
    for (i, &z) in attr.iter().chain(behavior).enumerate() {
        let w = params.fusion_w.row(i);
        for (o, &wv) in u.iter_mut().zip(w) {
            *o = *o + z * wv;
        }
    }
    u
}

/// Activations of one fused forward pass.
pub struct FusedCache<F> {
    positions: Vec<Vec<usize>>,
    input_mask: Option<Vec<F>>,
    attr_cache: StackCache<F>,
    attr_out: Mat<F>,
    behavior: Mat<F>,
    backbone_cache: Option<BackboneCache<F>>,
}

impl<F: Scalar> AttrEncoder<F> {
    pub fn init(attribute: &str, vocab: AttributeVocab, dim: usize, layers: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut fusion_w = Mat::xavier(2 * dim, dim, rng);
        fusion_w.scale(F::from_f64(0.1));
        // start from the backbone's user vector: identity on the behavior half
        for i in 0..dim {
            for j in 0..dim {
                fusion_w.data[(dim + i) * dim + j] = if i == j { F::one() } else { F::zero() };
            }
        }
        Self {
            attribute: attribute.to_string(),
            token_emb: Mat::xavier(vocab.len(), dim, rng),
            vocab,
            pos_emb: Mat::xavier(max_len, dim, rng),
            stack: EncoderStack::init(StackShape { dim, layers, ffn_dim: dim }, rng),
            fusion_w,
            fusion_b: Mat::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.fusion_b.cols
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.rows
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    pub fn cast<G: Scalar>(&self) -> AttrEncoder<G> {
        AttrEncoder {
            attribute: self.attribute.clone(),
            vocab: self.vocab.clone(),
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            stack: self.stack.cast(),
            fusion_w: self.fusion_w.cast(),
            fusion_b: self.fusion_b.cast(),
        }
    }

    /// Input embedding of one position: mean over its value tokens.
    pub fn embed_position(&self, tokens: &[usize]) -> Vec<F> {
        let mut v = vec![F::zero(); self.dim()];
        let inv = F::one() / F::from_f64(tokens.len() as f64);
        for &t in tokens {
            for (o, &e) in v.iter_mut().zip(self.token_emb.row(t)) {
                *o = *o + e * inv;
            }
        }
        v
    }

    fn encode_attrs(&self, seq: &AttributeSequence, dropout: &mut Dropout<'_>) -> (Mat<F>, Option<Vec<F>>, StackCache<F>) {
        let mut x = Mat::zeros(seq.len(), self.dim());
        for (t, toks) in seq.positions.iter().enumerate() {
            let e = self.embed_position(toks);
            for (o, (&a, &p)) in x.row_mut(t).iter_mut().zip(e.iter().zip(self.pos_emb.row(t))) {
                *o = a + p;
            }
        }
        let mask = dropout.mask(x.len());
        apply_mask(&mut x, &mask);
        let (out, cache) = self.stack.forward(&x, dropout);
        (out, mask, cache)
    }

    /// Attribute-conditioned user vectors at every position. `items` and
    /// `seq` must already be truncated to the same length.
    pub fn forward(
        &self,
        backbone: &Backbone<F>,
        items: &[usize],
        seq: &AttributeSequence,
        mode: FineTuneMode,
        dropout: &mut Dropout<'_>,
    ) -> (Mat<F>, FusedCache<F>) {
        assert_eq!(items.len(), seq.len(), "attribute sequence misaligned with history");
        let (behavior, backbone_cache) = match mode {
            FineTuneMode::Frozen => (backbone.forward(items, &mut Dropout::off()).0, None),
            FineTuneMode::Full => {
                let (b, c) = backbone.forward(items, dropout);
                (b, Some(c))
            }
        };
        self.forward_with_behavior(behavior, backbone_cache, seq, dropout)
    }

    fn forward_with_behavior(
        &self,
        behavior: Mat<F>,
        backbone_cache: Option<BackboneCache<F>>,
        seq: &AttributeSequence,
        dropout: &mut Dropout<'_>,
    ) -> (Mat<F>, FusedCache<F>) {
        let (attr_out, input_mask, attr_cache) = self.encode_attrs(seq, dropout);
        let d = self.dim();
        let mut users = Mat::zeros(seq.len(), d);
        for t in 0..seq.len() {
            users.row_mut(t).copy_from_slice(&fuse(behavior.row(t), attr_out.row(t), self));
        }
        let cache = FusedCache { positions: seq.positions.clone(), input_mask, attr_cache, attr_out, behavior, backbone_cache };
        (users, cache)
    }

    /// Accumulates gradients of the fused outputs into the attribute
    /// parameters, and into the backbone when the cache was built in full mode.
    pub fn backward(
        &self,
        d_users: &Mat<F>,
        cache: &FusedCache<F>,
        grads: &mut AttrEncoder<F>,
        backbone: &Backbone<F>,
        backbone_grads: Option<&mut Backbone<F>>,
    ) {
        let d = self.dim();
        let t_len = d_users.rows;
        let mut d_attr = Mat::zeros(t_len, d);
        let mut d_behavior = Mat::zeros(t_len, d);
        for t in 0..t_len {
            let du = d_users.row(t);
            for (b, &g) in grads.fusion_b.data.iter_mut().zip(du) {
                *b = *b + g;
            }
            let z = cache.attr_out.row(t).iter().chain(cache.behavior.row(t));
            for (i, &zi) in z.enumerate() {
                let wrow = self.fusion_w.row(i);
                let grow = grads.fusion_w.row_mut(i);
                let mut acc = F::zero();
                for j in 0..d {
                    grow[j] = grow[j] + zi * du[j];
                    acc = acc + wrow[j] * du[j];
                }
                if i < d {
                    d_attr.data[t * d + i] = acc;
                } else {
                    d_behavior.data[t * d + i - d] = acc;
                }
            }
        }
        let mut dx = self.stack.backward(&d_attr, &cache.attr_cache, &mut grads.stack);
        apply_mask(&mut dx, &cache.input_mask);
        for (t, toks) in cache.positions.iter().enumerate() {
            let inv = F::one() / F::from_f64(toks.len() as f64);
            let g = dx.row(t).to_vec();
            for &tok in toks {
                for (a, &v) in grads.token_emb.row_mut(tok).iter_mut().zip(&g) {
                    *a = *a + v * inv;
                }
            }
            for (a, &v) in grads.pos_emb.row_mut(t).iter_mut().zip(&g) {
                *a = *a + v;
            }
        }
        if let (Some(bg), Some(bc)) = (backbone_grads, cache.backbone_cache.as_ref()) {
            backbone.backward(&d_behavior, bc, bg);
        }
    }

    /// Summed BPR loss of the fused user vectors over all positions of `ex`.
    /// Item embeddings come from `backbone`; in full mode their gradient and
    /// the rest of the backbone's are accumulated into `backbone_grads`.
    pub fn loss_and_grad(
        &self,
        backbone: &Backbone<F>,
        ex: &SequenceExample,
        seq: &AttributeSequence,
        mode: FineTuneMode,
        grads: &mut AttrEncoder<F>,
        mut backbone_grads: Option<&mut Backbone<F>>,
        dropout: &mut Dropout<'_>,
    ) -> F {
        let (users, cache) = self.forward(backbone, &ex.inputs, seq, mode, dropout);
        let (loss, d_users) = bpr_output_grad(backbone, &users, ex, mode, backbone_grads.as_deref_mut());
        self.backward(&d_users, &cache, grads, backbone, backbone_grads);
        loss
    }

    /// User vector for retrieval: last-position fused representation.
    pub fn user_vector(&self, backbone: &Backbone<F>, history: &[usize], seq: &AttributeSequence) -> Vec<F> {
        let items = backbone.truncate(history);
        let seq = seq.truncated(backbone.config.max_len.min(self.max_len()));
        let items = &items[items.len() - seq.len()..];
        let (users, _) = self.forward(backbone, items, &seq, FineTuneMode::Frozen, &mut Dropout::off());
        users.row(users.rows - 1).to_vec()
    }
}

/// BPR loss over fused outputs; returns the loss and its gradient w.r.t. the
/// user vectors. Item-embedding gradients go to `backbone_grads` in full mode.
fn bpr_output_grad<F: Scalar>(
    backbone: &Backbone<F>,
    users: &Mat<F>,
    ex: &SequenceExample,
    mode: FineTuneMode,
    mut backbone_grads: Option<&mut Backbone<F>>,
) -> (F, Mat<F>) {
    let d = users.cols;
    let mut d_users = Mat::zeros(users.rows, d);
    let mut loss = F::zero();
    for t in 0..users.rows {
        let u = users.row(t);
        let (p, n) = (ex.positives[t], ex.negatives[t]);
        let diff = backbone.score(u, p) - backbone.score(u, n);
        loss = loss + nn::softplus_neg(diff);
        let g = -nn::sigmoid(-diff);
        let (ep, en) = (backbone.item_vec(p), backbone.item_vec(n));
        for (k, dv) in d_users.row_mut(t).iter_mut().enumerate() {
            *dv = g * (ep[k] - en[k]);
        }
        if let (FineTuneMode::Full, Some(bg)) = (mode, backbone_grads.as_deref_mut()) {
            for (k, &uv) in u.iter().enumerate() {
                bg.item_emb.data[(p + 1) * d + k] = bg.item_emb.data[(p + 1) * d + k] + g * uv;
                bg.item_emb.data[(n + 1) * d + k] = bg.item_emb.data[(n + 1) * d + k] - g * uv;
            }
        }
    }
    (loss, d_users)
}

/// Seeds token embeddings from a text file of `token v1 ... vd` lines.
/// Returns how many vocabulary tokens were found.
pub fn load_word_vectors<F: Scalar>(path: &Path, vocab: &AttributeVocab, emb: &mut Mat<F>) -> Result<usize, AttrToolError> {
    let text = fs::read_to_string(path).map_err(|source| AttrToolError::Io { path: path.into(), source })?;
    let mut hits = 0;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let vals: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| AttrToolError::WordVectors { path: path.into(), line: n + 1, reason: e.to_string() })?;
        if vals.len() != emb.cols {
            return Err(AttrToolError::WordVectors {
                path: path.into(),
                line: n + 1,
                reason: format!("expected {} values, found {}", emb.cols, vals.len()),
            });
        }
        let tok = normalize_attribute_value(tok);
        if let Some(&id) = vocab.index.get(&tok) {
            for (d, v) in emb.row_mut(id).iter_mut().zip(vals) {
                *d = F::from_f64(v);
            }
            hits += 1;
        }
    }
    Ok(hits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: FineTuneMode,
    pub word_vectors: Option<PathBuf>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            patience: 5,
            seed: 42,
            mode: FineTuneMode::Frozen,
            word_vectors: None,
        }
    }
}

/// Result of fine-tuning one attribute tool.
#[derive(Debug, Clone)]
pub struct FineTuned {
    pub encoder: AttrEncoderParams,
    /// Jointly trained backbone in full mode; `None` when frozen.
    pub tuned_backbone: Option<BackboneParams>,
    pub log: seqrec::TrainLog,
}

impl FineTuned {
    pub fn trainable_params(&self, backbone: &BackboneParams) -> usize {
        trainable_params(backbone, &self.encoder, self.tuned_backbone.is_some())
    }
}

pub fn trainable_params(backbone: &BackboneParams, encoder: &AttrEncoderParams, full: bool) -> usize {
    encoder.num_params() + if full { backbone.num_params() } else { 0 }
}

/// Trains the attribute encoder and fusion layer for `attribute`.
///
/// Targets are next items within each user's training sequence; validation
/// items drive early stopping. In frozen mode the backbone is only read.
pub fn fine_tune(
    backbone: &BackboneParams,
    split: &DatasetSplit,
    attribute: &str,
    cfg: &FineTuneConfig,
) -> Result<FineTuned, AttrToolError> {
    let attribute = normalize_attribute_value(attribute);
    if !split.catalog.has_attribute(&attribute) {
        return Err(unknown_attribute(&split.catalog, &attribute));
    }
    let vocab = AttributeVocab::from_catalog(&split.catalog, &attribute);
    let max_len = backbone.config.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc: AttrEncoder<f32> = AttrEncoder::init(&attribute, vocab.clone(), backbone.dim(), cfg.layers, max_len, &mut rng);
    if let Some(p) = &cfg.word_vectors {
        load_word_vectors(p, &vocab, &mut enc.token_emb)?;
    }
    let mut tuned = backbone.clone();
    let full = cfg.mode == FineTuneMode::Full;
    let mut log = seqrec::TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(FineTuned { encoder: enc, tuned_backbone: full.then_some(tuned), log });
    }

    let sizes: Vec<usize> = enc.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let bb_sizes: Vec<usize> = tuned.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut bb_adam = Adam::new(cfg.lr, &bb_sizes);
    let mut grads = enc.zeros_like();
    let mut bb_grads = tuned.zeros_like();
    let mut best: (f64, AttrEncoder<f32>, Backbone<f32>) = (f64::NEG_INFINITY, enc.clone(), tuned.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..split.histories.len()).collect();
    let attr_seqs: Vec<AttributeSequence> = split
        .histories
        .iter()
        .map(|h| build_attribute_sequence(&h.test_input(), &attribute, &split.catalog, &vocab))
        .collect::<Result<_, _>>()?;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            grads.zero_all();
            if full {
                bb_grads.zero_all();
            }
            let mut batch_loss = 0.0f64;
            let mut pairs = 0;
            for &u in chunk {
                let h = &split.histories[u];
                let Some(ex) = seqrec::training_example(h, max_len, backbone.num_items(), &mut rng) else { continue };
                // the example's inputs end where the training sequence's last-but-one item sits
                let start = h.sequence.len() - 1 - ex.inputs.len();
                let seq = AttributeSequence { positions: attr_seqs[u].positions[start..start + ex.inputs.len()].to_vec() };
                let mut dropout = Dropout { rate: cfg.dropout, rng: Some(&mut rng) };
                let bg = if full { Some(&mut bb_grads) } else { None };
                batch_loss += enc.loss_and_grad(&tuned, &ex, &seq, cfg.mode, &mut grads, bg, &mut dropout) as f64;
                pairs += ex.positives.len();
            }
            if pairs == 0 {
                continue;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(AttrToolError::Divergence { epoch, step, loss: batch_loss });
            }
            let inv = 1.0 / pairs as f32;
            for (_, g) in grads.tensors_mut() {
                g.scale(inv);
            }
            adam.step(
                enc.tensors_mut().into_iter().map(|(_, t)| t).collect(),
                grads.tensors().into_iter().map(|(_, t)| t).collect(),
            );
            if full {
                for (_, g) in bb_grads.tensors_mut() {
                    g.scale(inv);
                }
                bb_adam.step(
                    tuned.tensors_mut().into_iter().map(|(_, t)| t).collect(),
                    bb_grads.tensors().into_iter().map(|(_, t)| t).collect(),
                );
            }
            epoch_loss += batch_loss;
            epoch_pairs += pairs;
        }
        let mean_loss = if epoch_pairs > 0 { epoch_loss / epoch_pairs as f64 } else { 0.0 };
        if !enc.all_finite() || !tuned.all_finite() {
            return Err(AttrToolError::Divergence { epoch, step, loss: mean_loss });
        }
        let (val_recall, val_ndcg) = seqrec::validate_with(split, |h| {
            let seq = AttributeSequence { positions: attr_seqs[h.user_id].positions[..h.sequence.len()].to_vec() };
            let u = enc.user_vector(&tuned, &h.sequence, &seq);
            tuned.score_all(&u)
        });
        log.epochs.push(seqrec::EpochRecord { epoch, loss: mean_loss, val_recall, val_ndcg });
        log::info!("finetune[{attribute}] epoch={epoch} loss={mean_loss:.6} val_ndcg={val_ndcg:.4}");
        if val_ndcg > best.0 {
            best = (val_ndcg, enc.clone(), tuned.clone());
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(FineTuned { encoder: best.1, tuned_backbone: full.then_some(best.2), log })
}

impl FineTuned {
    pub fn to_checkpoint(&self, dataset: &str, backbone: &BackboneParams) -> Checkpoint {
        let enc = &self.encoder;
        let bb = self.tuned_backbone.as_ref().unwrap_or(backbone);
        let mut c = Checkpoint::default();
        c.set("kind", "attribute");
        c.set("dataset", dataset);
        c.set("attribute_name", &enc.attribute);
        c.set("mode", if self.tuned_backbone.is_some() { "full" } else { "frozen" });
        c.set("d", bb.config.dim);
        c.set("layers", bb.config.layers);
        c.set("heads", bb.config.heads);
        c.set("max_len", bb.config.max_len);
        c.set("num_items", bb.config.num_items);
        c.set("attr_layers", enc.stack.layers.len());
        c.set("vocab", enc.vocab.tokens()[1..].join("\n"));
        c.set("trainable_params", self.trainable_params(backbone));
        for (name, t) in enc.tensors() {
            c.push_mat(&name, t);
        }
        if let Some(tb) = &self.tuned_backbone {
            for (name, t) in tb.tensors() {
                c.push_mat(&format!("backbone.{name}"), t);
            }
        }
        c
    }
}

/// Loads an attribute checkpoint; also returns the jointly tuned backbone
/// when the checkpoint was produced in full mode.
pub fn load_attr_checkpoint(c: &Checkpoint) -> Result<(AttrEncoderParams, Option<BackboneParams>), AttrToolError> {
    let kind = c.get("kind")?;
    if kind != "attribute" {
        return Err(AttrToolError::WrongKind(kind.to_string()));
    }
    let attribute = c.get("attribute_name")?.to_string();
    let vocab_text = c.get("vocab")?;
    let vocab = AttributeVocab::new(vocab_text.split('\n').filter(|s| !s.is_empty()).map(String::from));
    let dim = c.get_parsed("d")?;
    let layers = c.get_parsed("attr_layers")?;
    let max_len = c.get_parsed("max_len")?;
    let mut enc = AttrEncoder::init(&attribute, vocab, dim, layers, max_len, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in enc.tensors_mut() {
        c.load_into(&name, t)?;
    }
    let tuned = if c.get("mode")? == "full" { Some(Backbone::from_checkpoint_prefixed(c, "backbone.")?) } else { None };
    Ok((enc, tuned))
}

/// Description and provenance of a registered retrieval tool.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalToolSpec {
    pub attribute_name: String,
    pub checkpoint: Option<PathBuf>,
    pub vocabulary: Vec<String>,
    pub description: String,
}

/// A loaded, query-ready retrieval tool.
#[derive(Debug, Clone)]
pub struct RetrievalTool {
    pub spec: RetrievalToolSpec,
    pub encoder: AttrEncoderParams,
    pub backbone: Arc<BackboneParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub item: usize,
    pub name: String,
    pub score: f32,
}

impl RetrievalTool {
    pub fn new(encoder: AttrEncoderParams, backbone: Arc<BackboneParams>, checkpoint: Option<PathBuf>) -> Self {
        let attribute = encoder.attribute.clone();
        let vocabulary: Vec<String> = encoder.vocab.tokens()[1..].to_vec();
        let preview: Vec<&str> = vocabulary.iter().take(8).map(String::as_str).collect();
        let description = format!(
            "Retrieval[{attribute}, K]: retrieves K items that match the user's history and taste in {attribute} (values such as {}).",
            preview.join(", ")
        );
        Self { spec: RetrievalToolSpec { attribute_name: attribute, checkpoint, vocabulary, description }, encoder, backbone }
    }

    pub fn attribute(&self) -> &str {
        &self.spec.attribute_name
    }

    pub fn scores(&self, catalog: &ItemCatalog, history: &[usize]) -> Result<Vec<f32>, AttrToolError> {
        if history.is_empty() {
            return Err(AttrToolError::EmptyHistory);
        }
        let seq = build_attribute_sequence(history, self.attribute(), catalog, &self.encoder.vocab)?;
        let u = self.encoder.user_vector(&self.backbone, history, &seq);
        Ok(self.backbone.score_all(&u))
    }

    /// Top-`k` items for the attribute-conditioned user vector, excluding
    /// `exclude`; ties broken by ascending item id.
    pub fn retrieve(
        &self,
        catalog: &ItemCatalog,
        history: &[usize],
        k: usize,
        k_max: usize,
        exclude: &BTreeSet<usize>,
    ) -> Result<Vec<Retrieved>, AttrToolError> {
        if k == 0 || k > k_max {
            return Err(AttrToolError::BadK { k, max: k_max });
        }
        let scores = self.scores(catalog, history)?;
        Ok(rank_scores(&scores, k, exclude)
            .items
            .into_iter()
            .map(|(item, score)| Retrieved { item, name: catalog.name(item).to_string(), score })
            .collect())
    }
}

/// One row of the trainable-parameter / FLOP comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReportRow {
    pub model: String,
    pub trainable_params: usize,
    pub flops: u64,
}

/// Multiply-adds for one forward pass over a full `max_len` window:
/// backbone stack, plus attribute stack and the `2d x d` fusion when present.
pub fn forward_flops(backbone: &BackboneParams, encoder: Option<&AttrEncoderParams>) -> u64 {
    let t = backbone.config.max_len;
    let mut f = stack_flops(backbone.config.stack_shape(), t);
    if let Some(e) = encoder {
        let d = e.dim();
        f += stack_flops(StackShape { dim: d, layers: e.stack.layers.len(), ffn_dim: d }, t);
        f += (2 * d * d) as u64;
    }
    f
}

pub fn param_report(backbone: &BackboneParams, encoder: &AttrEncoderParams) -> Vec<ParamReportRow> {
    let attr = &encoder.attribute;
    vec![
        ParamReportRow { model: "backbone".into(), trainable_params: backbone.num_params(), flops: forward_flops(backbone, None) },
        ParamReportRow {
            model: format!("frozen+{attr}"),
            trainable_params: trainable_params(backbone, encoder, false),
            flops: forward_flops(backbone, Some(encoder)),
        },
        ParamReportRow {
            model: format!("full+{attr}"),
            trainable_params: trainable_params(backbone, encoder, true),
            flops: forward_flops(backbone, Some(encoder)),
        },
    ]
}

pub const PARAM_REPORT_HEADER: &str = "# flops = multiply-adds per forward pass over T=max_len positions: \
per layer 4*T*d^2 (q,k,v,out) + 2*T^2*d (scores, context) + 2*T*d*d_ff (ffn); \
attribute tools add their own stack plus 2*d^2 for fusion\nmodel\ttrainable_params\tflops\n";

pub fn render_param_report(rows: &[ParamReportRow]) -> String {
    let mut s = PARAM_REPORT_HEADER.to_string();
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.model, r.trainable_params, r.flops));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqrec::BackboneConfig;

    fn catalog() -> ItemCatalog {
        let mut c = ItemCatalog::new((0..4).map(|i| (i as u64, format!("m{i}"))).collect());
        c.set_attribute("genre", 0, vec!["Comedy".into()]);
        c.set_attribute("genre", 1, vec!["Drama".into()]);
        c.set_attribute("genre", 2, vec!["Comedy".into(), "Romance".into()]);
        c
    }

    fn encoder(vocab: AttributeVocab) -> AttrEncoder<f64> {
        AttrEncoder::init("genre", vocab, 4, 1, 6, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn sequence_direct_lookup_and_unk() {
        let c = catalog();
        let v = AttributeVocab::from_catalog(&c, "genre");
        let s = build_attribute_sequence(&[0, 1, 3], "genre", &c, &v).unwrap();
        assert_eq!(s.positions, vec![vec![v.id("comedy")], vec![v.id("drama")], vec![0]]);
        assert_eq!(v.tokens()[0], UNK_TOKEN);
    }

    #[test]
    fn multi_valued_position_embeds_as_mean() {
        let c = catalog();
        let v = AttributeVocab::from_catalog(&c, "genre");
        let s = build_attribute_sequence(&[2], "genre", &c, &v).unwrap();
        let (a, b) = (v.id("comedy"), v.id("romance"));
        assert_eq!(s.positions[0], vec![a, b]);
        let e = encoder(v);
        let got = e.embed_position(&s.positions[0]);
        for k in 0..4 {
            let want = 0.5 * (e.token_emb.at(a, k) + e.token_emb.at(b, k));
            assert!((got[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_attribute_lists_available() {
        let c = catalog();
        let v = AttributeVocab::from_catalog(&c, "genre");
        let err = build_attribute_sequence(&[0], "director", &c, &v).unwrap_err();
        assert_eq!(err.to_string(), "unknown attribute `director`; available: genre");
    }

    #[test]
    fn fuse_zero_and_identity() {
        let mut e = encoder(AttributeVocab::new(vec![]));
        e.fusion_w.fill_zero();
        e.fusion_b.fill_zero();
        assert_eq!(fuse(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &e), vec![0.0; 4]);
        for i in 0..4 {
            e.fusion_w.data[(4 + i) * 4 + i] = 1.0;
        }
        assert_eq!(fuse(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], &e), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fuse_matches_explicit_matvec() {
        let e = encoder(AttributeVocab::new(vec![]));
        let h = [0.3, -1.0, 0.25, 2.0];
        let a = [1.5, 0.5, -0.75, 0.1];
        let z: Vec<f64> = a.iter().chain(&h).copied().collect();
        let got = fuse(&h, &a, &e);
        for j in 0..4 {
            let want: f64 = (0..8).map(|i| z[i] * e.fusion_w.at(i, j)).sum::<f64>() + e.fusion_b.data[j];
            assert!((got[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn initial_fusion_passes_behavior_through_plus_small_attr_term() {
        let bb: Backbone<f64> = Backbone::init(
            BackboneConfig { dim: 4, layers: 1, heads: 1, max_len: 6, num_items: 4 },
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let c = catalog();
        let v = AttributeVocab::from_catalog(&c, "genre");
        let e = encoder(v.clone());
        let s = build_attribute_sequence(&[0, 1], "genre", &c, &v).unwrap();
        let u = e.user_vector(&bb, &[0, 1], &s);
        let h = bb.represent(&[0, 1]);
        let drift: f64 = u.iter().zip(&h).map(|(a, b)| (a - b).abs()).sum();
        assert!(drift < 2.0, "{drift}");
    }
}
