//! Dense math used by the sequence encoders: a row-major matrix, a causal
//! pre-LN transformer stack with hand-written backward passes, and Adam.
//!
//! Everything is generic over the float type so that training can run in
//! `f32` while gradient checks run the identical code path in `f64`.

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Self { rows, cols, data }
    }

    /// Glorot-uniform initialisation.
    pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn cast<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == F::zero() {
                    continue;
                }
                let b = other.row(k);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`, accumulated into `acc`.
    pub fn matmul_tn_into(&self, other: &Mat<F>, acc: &mut Mat<F>) {
        assert_eq!(self.rows, other.rows);
        assert_eq!((acc.rows, acc.cols), (self.cols, other.cols));
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &av) in a.iter().enumerate() {
                if av == F::zero() {
                    continue;
                }
                let o = acc.row_mut(i);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    fn add_row_bias(&mut self, bias: &Mat<F>) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
    }

    fn sum_rows_into(&self, acc: &mut Mat<F>) {
        for r in 0..self.rows {
            for (a, &v) in acc.data.iter_mut().zip(self.row(r)) {
                *a = *a + v;
            }
        }
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Named parameter tensors, enumerated in a fixed order.
///
/// The order is shared by optimizers, checkpoints, and gradient buffers, so
/// implementations must list tensors identically in both methods.
pub trait ParamTensors<F: Scalar> {
    fn tensors(&self) -> Vec<(String, &Mat<F>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_all(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill_zero();
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Encoder stack shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub dim: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub ln1_gain: Mat<F>,
    pub ln1_bias: Mat<F>,
    pub w_query: Mat<F>,
    pub b_query: Mat<F>,
    pub w_key: Mat<F>,
    pub b_key: Mat<F>,
    pub w_value: Mat<F>,
    pub b_value: Mat<F>,
    pub w_out: Mat<F>,
    pub b_out: Mat<F>,
    pub ln2_gain: Mat<F>,
    pub ln2_bias: Mat<F>,
    pub w_ffn1: Mat<F>,
    pub b_ffn1: Mat<F>,
    pub w_ffn2: Mat<F>,
    pub b_ffn2: Mat<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    fn init(shape: StackShape, rng: &mut ChaCha8Rng) -> Self {
        let d = shape.dim;
        let h = shape.ffn_dim;
        Self {
            ln1_gain: Mat::filled(1, d, F::one()),
            ln1_bias: Mat::zeros(1, d),
            w_query: Mat::xavier(d, d, rng),
            b_query: Mat::zeros(1, d),
            w_key: Mat::xavier(d, d, rng),
            b_key: Mat::zeros(1, d),
            w_value: Mat::xavier(d, d, rng),
            b_value: Mat::zeros(1, d),
            w_out: Mat::xavier(d, d, rng),
            b_out: Mat::zeros(1, d),
            ln2_gain: Mat::filled(1, d, F::one()),
            ln2_bias: Mat::zeros(1, d),
            w_ffn1: Mat::xavier(d, h, rng),
            b_ffn1: Mat::zeros(1, h),
            w_ffn2: Mat::xavier(h, d, rng),
            b_ffn2: Mat::zeros(1, d),
        }
    }

    fn fields(&self) -> [(&'static str, &Mat<F>); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.w_query", &self.w_query),
            ("attn.b_query", &self.b_query),
            ("attn.w_key", &self.w_key),
            ("attn.b_key", &self.b_key),
            ("attn.w_value", &self.w_value),
            ("attn.b_value", &self.b_value),
            ("attn.w_out", &self.w_out),
            ("attn.b_out", &self.b_out),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w1", &self.w_ffn1),
            ("ffn.b1", &self.b_ffn1),
            ("ffn.w2", &self.w_ffn2),
            ("ffn.b2", &self.b_ffn2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Mat<F>); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.w_query", &mut self.w_query),
            ("attn.b_query", &mut self.b_query),
            ("attn.w_key", &mut self.w_key),
            ("attn.b_key", &mut self.b_key),
            ("attn.w_value", &mut self.w_value),
            ("attn.b_value", &mut self.b_value),
            ("attn.w_out", &mut self.w_out),
            ("attn.b_out", &mut self.b_out),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.w1", &mut self.w_ffn1),
            ("ffn.b1", &mut self.b_ffn1),
            ("ffn.w2", &mut self.w_ffn2),
            ("ffn.b2", &mut self.b_ffn2),
        ]
    }
}

/// A stack of causal single-head transformer layers followed by a final
/// layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack<F> {
    pub layers: Vec<EncoderLayer<F>>,
    pub final_gain: Mat<F>,
    pub final_bias: Mat<F>,
}

struct NormCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    norm1: NormCache<F>,
    attn_in: Mat<F>,
    query: Mat<F>,
    key: Mat<F>,
    value: Mat<F>,
    probs: Mat<F>,
    context: Mat<F>,
    attn_mask: Option<Vec<F>>,
    norm2: NormCache<F>,
    ffn_in: Mat<F>,
    ffn_pre: Mat<F>,
    ffn_act: Mat<F>,
    ffn_mask: Option<Vec<F>>,
}

/// Activations retained by [`EncoderStack::forward`] for the backward pass.
pub struct StackCache<F> {
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
}

/// Inverted-dropout configuration; `None` rng means inference mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn mask<F: Scalar>(&mut self, n: usize) -> Option<Vec<F>> {
        if !self.active() {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = F::from_f64(1.0 / keep);
        let rng = self.rng.as_mut().expect("active dropout has an rng");
        Some(
            (0..n)
                .map(|_| if rng.random::<f64>() < keep { scale } else { F::zero() })
                .collect(),
        )
    }
}

pub fn apply_mask<F: Scalar>(m: &mut Mat<F>, mask: &Option<Vec<F>>) {
    if let Some(mask) = mask {
        for (v, &k) in m.data.iter_mut().zip(mask) {
            *v = *v * k;
        }
    }
}

fn layer_norm<F: Scalar>(x: &Mat<F>, gain: &Mat<F>, bias: &Mat<F>) -> (Mat<F>, NormCache<F>) {
    let d = x.cols;
    let n = F::from_f64(d as f64);
    let eps = F::from_f64(LAYER_NORM_EPS);
    let mut out = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat.data[r * d + c] = h;
            out.data[r * d + c] = h * gain.data[c] + bias.data[c];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &Mat<F>,
    cache: &NormCache<F>,
    gain: &Mat<F>,
    d_gain: &mut Mat<F>,
    d_bias: &mut Mat<F>,
) -> Mat<F> {
    let d = dy.cols;
    let n = F::from_f64(d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = F::zero();
        let mut mean_dxh_xh = F::zero();
        for c in 0..d {
            d_gain.data[c] = d_gain.data[c] + g[c] * xh[c];
            d_bias.data[c] = d_bias.data[c] + g[c];
            let dxh = g[c] * gain.data[c];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xh = mean_dxh_xh + dxh * xh[c];
        }
        mean_dxh = mean_dxh / n;
        mean_dxh_xh = mean_dxh_xh / n;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = g[c] * gain.data[c];
            dx.data[r * d + c] = rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

fn linear<F: Scalar>(x: &Mat<F>, w: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    let mut y = x.matmul(w);
    y.add_row_bias(b);
    y
}

/// Backward of `y = x·w + b`; accumulates parameter grads and returns `dx`.
fn linear_backward<F: Scalar>(
    dy: &Mat<F>,
    x: &Mat<F>,
    w: &Mat<F>,
    dw: &mut Mat<F>,
    db: &mut Mat<F>,
) -> Mat<F> {
    x.matmul_tn_into(dy, dw);
    dy.sum_rows_into(db);
    dy.matmul_nt(w)
}

impl<F: Scalar> EncoderStack<F> {
    pub fn init(shape: StackShape, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: (0..shape.layers).map(|_| EncoderLayer::init(shape, rng)).collect(),
            final_gain: Mat::filled(1, shape.dim, F::one()),
            final_bias: Mat::zeros(1, shape.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.final_gain.cols
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut_prefixed("") {
            t.fill_zero();
        }
        z
    }

    pub fn tensors_prefixed(&self, prefix: &str) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("{prefix}layer{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}final_norm.gain"), &self.final_gain));
        out.push((format!("{prefix}final_norm.bias"), &self.final_bias));
        out
    }

    pub fn tensors_mut_prefixed(&mut self, prefix: &str) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("{prefix}layer{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}final_norm.gain"), &mut self.final_gain));
        out.push((format!("{prefix}final_norm.bias"), &mut self.final_bias));
        out
    }

    /// Runs the stack over `x` (one row per sequence position, oldest first).
    /// Position `i` attends only to positions `<= i`.
    pub fn forward(&self, x: &Mat<F>, dropout: &mut Dropout<'_>) -> (Mat<F>, StackCache<F>) {
        let d = x.cols;
        let t = x.rows;
        let scale = F::from_f64(1.0 / (d as f64).sqrt());
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (attn_in, norm1) = layer_norm(&h, &layer.ln1_gain, &layer.ln1_bias);
            let query = linear(&attn_in, &layer.w_query, &layer.b_query);
            let key = linear(&attn_in, &layer.w_key, &layer.b_key);
            let value = linear(&attn_in, &layer.w_value, &layer.b_value);

            let mut probs = Mat::zeros(t, t);
            for i in 0..t {
                let qi = query.row(i);
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    let s = dot(qi, key.row(j)) * scale;
                    probs.data[i * t + j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = F::zero();
                for j in 0..=i {
                    let e = (probs.data[i * t + j] - max).exp();
                    probs.data[i * t + j] = e;
                    sum = sum + e;
                }
                for j in 0..=i {
                    probs.data[i * t + j] = probs.data[i * t + j] / sum;
                }
            }
            let context = probs.matmul(&value);
            let mut attn_out = linear(&context, &layer.w_out, &layer.b_out);
            let attn_mask = dropout.mask(attn_out.len());
            apply_mask(&mut attn_out, &attn_mask);
            h.add_assign(&attn_out);

            let (ffn_in, norm2) = layer_norm(&h, &layer.ln2_gain, &layer.ln2_bias);
            let ffn_pre = linear(&ffn_in, &layer.w_ffn1, &layer.b_ffn1);
            let mut ffn_act = ffn_pre.clone();
            ffn_act.data.iter_mut().for_each(|v| *v = v.max(F::zero()));
            let mut ffn_out = linear(&ffn_act, &layer.w_ffn2, &layer.b_ffn2);
            let ffn_mask = dropout.mask(ffn_out.len());
            apply_mask(&mut ffn_out, &ffn_mask);
            h.add_assign(&ffn_out);

            caches.push(LayerCache {
                norm1,
                attn_in,
                query,
                key,
                value,
                probs,
                context,
                attn_mask,
                norm2,
                ffn_in,
                ffn_pre,
                ffn_act,
                ffn_mask,
            });
        }
        let (out, final_norm) = layer_norm(&h, &self.final_gain, &self.final_bias);
        (out, StackCache { layers: caches, final_norm })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the stack input.
    pub fn backward(&self, d_out: &Mat<F>, cache: &StackCache<F>, grads: &mut EncoderStack<F>) -> Mat<F> {
        let d = d_out.cols;
        let t = d_out.rows;
        let scale = F::from_f64(1.0 / (d as f64).sqrt());
        let mut dh = layer_norm_backward(
            d_out,
            &cache.final_norm,
            &self.final_gain,
            &mut grads.final_gain,
            &mut grads.final_bias,
        );
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let g = &mut grads.layers[li];

            // feed-forward residual branch
            let mut d_ffn_out = dh.clone();
            apply_mask(&mut d_ffn_out, &c.ffn_mask);
            let mut d_act =
                linear_backward(&d_ffn_out, &c.ffn_act, &layer.w_ffn2, &mut g.w_ffn2, &mut g.b_ffn2);
            for (dv, &pre) in d_act.data.iter_mut().zip(&c.ffn_pre.data) {
                if pre <= F::zero() {
                    *dv = F::zero();
                }
            }
            let d_ffn_in = linear_backward(&d_act, &c.ffn_in, &layer.w_ffn1, &mut g.w_ffn1, &mut g.b_ffn1);
            let d_norm2 = layer_norm_backward(&d_ffn_in, &c.norm2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
            dh.add_assign(&d_norm2);

            // attention residual branch
            let mut d_attn_out = dh.clone();
            apply_mask(&mut d_attn_out, &c.attn_mask);
            let d_context = linear_backward(&d_attn_out, &c.context, &layer.w_out, &mut g.w_out, &mut g.b_out);
            // context = probs · value
            let d_probs = d_context.matmul_nt(&c.value);
            let mut d_value = Mat::zeros(t, d);
            c.probs.matmul_tn_into(&d_context, &mut d_value);
            let mut d_scores = Mat::zeros(t, t);
            for i in 0..t {
                let mut inner = F::zero();
                for j in 0..=i {
                    inner = inner + d_probs.data[i * t + j] * c.probs.data[i * t + j];
                }
                for j in 0..=i {
                    let p = c.probs.data[i * t + j];
                    d_scores.data[i * t + j] = p * (d_probs.data[i * t + j] - inner) * scale;
                }
            }
            let d_query = d_scores.matmul(&c.key);
            let mut d_key = Mat::zeros(t, d);
            d_scores.matmul_tn_into(&c.query, &mut d_key);

            let mut d_attn_in = linear_backward(&d_query, &c.attn_in, &layer.w_query, &mut g.w_query, &mut g.b_query);
            d_attn_in.add_assign(&linear_backward(&d_key, &c.attn_in, &layer.w_key, &mut g.w_key, &mut g.b_key));
            d_attn_in.add_assign(&linear_backward(&d_value, &c.attn_in, &layer.w_value, &mut g.w_value, &mut g.b_value));
            let d_norm1 = layer_norm_backward(&d_attn_in, &c.norm1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
            dh.add_assign(&d_norm1);
        }
        dh
    }

    pub fn cast<G: Scalar>(&self) -> EncoderStack<G> {
        EncoderStack {
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_query: l.w_query.cast(),
                    b_query: l.b_query.cast(),
                    w_key: l.w_key.cast(),
                    b_key: l.b_key.cast(),
                    w_value: l.w_value.cast(),
                    b_value: l.b_value.cast(),
                    w_out: l.w_out.cast(),
                    b_out: l.b_out.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_ffn1: l.w_ffn1.cast(),
                    b_ffn1: l.b_ffn1.cast(),
                    w_ffn2: l.w_ffn2.cast(),
                    b_ffn2: l.b_ffn2.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }
}

/// Multiply-adds for one forward pass of a stack over `seq_len` positions.
pub fn stack_flops(shape: StackShape, seq_len: usize) -> u64 {
    let (d, h, t) = (shape.dim as u64, shape.ffn_dim as u64, seq_len as u64);
    // q/k/v/out projections + causal score and context products + two FFN matmuls
    let per_layer = 4 * t * d * d + 2 * t * t * d + 2 * t * d * h;
    per_layer * shape.layers as u64
}

/// `-log σ(x)` computed as softplus(-x) without overflow.
pub fn softplus_neg<F: Scalar>(x: F) -> F {
    let z = -x;
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Adam with bias correction. Moment buffers follow the tensor order of the
/// parameter set they were created for.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat<F>>, grads: Vec<&Mat<F>>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let c1 = F::from_f64(1.0 - self.beta1.powi(self.step));
        let c2 = F::from_f64(1.0 - self.beta2.powi(self.step));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] = p.data[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
