//! Token/position embeddings and a post-norm Transformer encoder with an
//! explicit backward pass.
//!
//! Each block computes
//!
//! ```text
//! a = x + MultiHeadAttention(x)
//! y = LayerNorm(a)
//! b = y + W2 · gelu(W1 · y)
//! z = LayerNorm(b)
//! ```
//!
//! Linear maps are stored as `in × out` matrices and applied as `x · W + b`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive score applied to masked attention keys.
pub const MASKED_SCORE: f64 = -1e9;

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Keep probability for dropout on the final hidden states (and inside
    /// the blocks when `internal_dropout` is set).
    pub dropout_keep: f64,
    pub layernorm_epsilon: f64,
    #[serde(default)]
    pub internal_dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size: 4,
            max_seq_len: 64,
            dropout_keep: 0.9,
            layernorm_epsilon: 1e-12,
            internal_dropout: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config(format!(
                "dropout_keep {} is outside (0, 1]",
                self.dropout_keep
            )));
        }
        if !(self.layernorm_epsilon > 0.0) {
            return Err(Error::config("layernorm_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Affine map `x · weight + bias` with `weight` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(input, output, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            bias: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gain: Array1::zeros(width),
            bias: Array1::zeros(width),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden_size;
        let f = config.ffn_size;
        Self {
            query: Linear::init(h, h, rng),
            key: Linear::init(h, h, rng),
            value: Linear::init(h, h, rng),
            output: Linear::init(h, h, rng),
            attention_norm: LayerNorm::new(h),
            ffn_in: Linear::init(h, f, rng),
            ffn_out: Linear::init(f, h, rng),
            ffn_norm: LayerNorm::new(h),
        }
    }

    fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        let f = config.ffn_size;
        Self {
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            output: Linear::zeros(h, h),
            attention_norm: LayerNorm::zeros(h),
            ffn_in: Linear::zeros(h, f),
            ffn_out: Linear::zeros(f, h),
            ffn_norm: LayerNorm::zeros(h),
        }
    }
}

/// Encoder weights: embedding tables plus one [`LayerParams`] per block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Normal(0, 0.02) matrices, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let token_embeddings = normal_matrix(config.vocab_size, config.hidden_size, rng);
        let position_embeddings = normal_matrix(config.max_seq_len, config.hidden_size, rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(config, rng))
            .collect();
        Self {
            token_embeddings,
            position_embeddings,
            layers,
        }
    }

    /// All-zero tensors with the shapes declared by `config` (gradient buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            token_embeddings: Array2::zeros((config.vocab_size, config.hidden_size)),
            position_embeddings: Array2::zeros((config.max_seq_len, config.hidden_size)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
        }
    }
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Token ids with the sequence-start id at index 0, plus the attention mask
/// (`true` for real positions, `false` for padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenIds {
    /// All positions unmasked.
    pub fn new(ids: Vec<usize>) -> Self {
        let attention_mask = vec![true; ids.len()];
        Self {
            ids,
            attention_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::input("token id sequence is empty"));
        }
        if self.ids.len() != self.attention_mask.len() {
            return Err(Error::input(format!(
                "{} ids but {} mask entries",
                self.ids.len(),
                self.attention_mask.len()
            )));
        }
        if self.ids.len() > config.max_seq_len {
            return Err(Error::Length {
                len: self.ids.len(),
                max: config.max_seq_len,
            });
        }
        if !self.attention_mask[0] {
            return Err(Error::input("sequence-start position must not be masked"));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::input(format!(
                "token id {id} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Final hidden states, row `j` is `h_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub states: Array2<f64>,
}

impl HiddenSequence {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Hidden state of the sequence-start token.
    pub fn sentence(&self) -> ndarray::ArrayView1<'_, f64> {
        self.states.row(0)
    }
}

/// Row `j` is `token_embeddings[ids[j]] + position_embeddings[j]`.
pub fn embed(token_ids: &TokenIds, params: &EncoderParams, config: &ModelConfig) -> Result<Array2<f64>> {
    token_ids.validate(config)?;
    let mut out = Array2::zeros((token_ids.len(), config.hidden_size));
    for (j, (&id, mut row)) in token_ids.ids.iter().zip(out.rows_mut()).enumerate() {
        row.assign(&params.token_embeddings.row(id));
        row += &params.position_embeddings.row(j);
    }
    Ok(out)
}

fn ensure_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// Output of [`multi_head_attention`]: the projected output and one
/// `m × m` attention-weight matrix per head.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
}

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    output: Array2<f64>,
}

/// Scaled dot-product attention over `num_heads` heads followed by the output
/// projection. Masked key positions receive exactly zero weight.
pub fn multi_head_attention(
    x: &Array2<f64>,
    layer: &LayerParams,
    mask: &[bool],
    config: &ModelConfig,
) -> Result<Attention> {
    ensure_finite(x, "attention input")?;
    if mask.len() != x.nrows() {
        return Err(Error::input(format!(
            "mask length {} does not match {} rows",
            mask.len(),
            x.nrows()
        )));
    }
    let cache = attention_forward(x, layer, mask, config);
    Ok(Attention {
        output: cache.output,
        weights: cache.probs,
    })
}

fn attention_forward(x: &Array2<f64>, layer: &LayerParams, mask: &[bool], config: &ModelConfig) -> AttentionCache {
    let m = x.nrows();
    let d = config.head_size();
    let scale = 1.0 / (d as f64).sqrt();
    let q = layer.query.forward(x);
    let k = layer.key.forward(x);
    let v = layer.value.forward(x);
    let mut context = Array2::zeros((m, config.hidden_size));
    let mut probs = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let cols = s![.., head * d..(head + 1) * d];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                scores.column_mut(j).mapv_inplace(|s| s + MASKED_SCORE);
            }
        }
        softmax_rows_inplace(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let output = layer.output.forward(&context);
    AttentionCache {
        q,
        k,
        v,
        probs,
        context,
        output,
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Per-row standardization (mean 0, variance 1) before gain and bias.
pub(crate) fn normalize_rows(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let width = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(0.0, |acc, &v| acc + v * v) / width;
        *s = 1.0 / (var + eps).sqrt();
        row *= *s;
    }
    (normalized, inv_std)
}

fn layer_norm_forward(x: &Array2<f64>, norm: &LayerNorm, eps: f64) -> (Array2<f64>, NormCache) {
    let (normalized, inv_std) = normalize_rows(x, eps);
    let y = &normalized * &norm.gain + &norm.bias;
    (y, NormCache { normalized, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, cache: &NormCache, norm: &LayerNorm, grad: &mut LayerNorm) -> Array2<f64> {
    grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &norm.gain;
    let width = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xhat), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.normalized.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xhat);
        Zip::from(&mut out)
            .and(&g)
            .and(&xhat)
            .for_each(|o, &gi, &xi| *o = s / width * (width * gi - sum_g - xi * sum_gx));
    }
    dx
}

/// Inverted-dropout mask with entries `0` or `1/keep`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, keep: f64, rng: &mut R) -> Array2<f64> {
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

struct LayerTrace {
    input: Array2<f64>,
    attention: AttentionCache,
    attention_dropout: Option<Array2<f64>>,
    attention_norm: NormCache,
    normed: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
    ffn_norm: NormCache,
}

/// Forward activations retained for [`backward`].
pub(crate) struct EncoderTrace {
    layers: Vec<LayerTrace>,
    pub output: Array2<f64>,
}

pub(crate) fn forward_trace<R: Rng + ?Sized>(
    token_ids: &TokenIds,
    params: &EncoderParams,
    config: &ModelConfig,
    mut rng: Option<&mut R>,
) -> Result<EncoderTrace> {
    let mut x = embed(token_ids, params, config)?;
    ensure_finite(&x, "embeddings")?;
    let mask = &token_ids.attention_mask;
    let (m, h) = x.dim();
    let keep = config.dropout_keep;
    let internal = config.internal_dropout && keep < 1.0;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let attention = attention_forward(&x, layer, mask, config);
        let attention_dropout = match (internal, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(m, h, keep, r)),
            _ => None,
        };
        let mut residual = attention.output.clone();
        if let Some(d) = &attention_dropout {
            residual *= d;
        }
        residual += &x;
        let (normed, attention_norm) = layer_norm_forward(&residual, &layer.attention_norm, config.layernorm_epsilon);
        let ffn_pre = layer.ffn_in.forward(&normed);
        let ffn_act = ffn_pre.mapv(gelu);
        let mut ffn = layer.ffn_out.forward(&ffn_act);
        let ffn_dropout = match (internal, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(m, h, keep, r)),
            _ => None,
        };
        if let Some(d) = &ffn_dropout {
            ffn *= d;
        }
        ffn += &normed;
        let (out, ffn_norm) = layer_norm_forward(&ffn, &layer.ffn_norm, config.layernorm_epsilon);
        layers.push(LayerTrace {
            input: std::mem::replace(&mut x, out),
            attention,
            attention_dropout,
            attention_norm,
            normed,
            ffn_pre,
            ffn_act,
            ffn_dropout,
            ffn_norm,
        });
    }
    ensure_finite(&x, "encoder output")?;
    Ok(EncoderTrace { layers, output: x })
}

/// Runs the encoder. In evaluation mode (`train_mode == false`) the result is
/// a pure function of the inputs; in train mode internal dropout is applied
/// when `config.internal_dropout` is set.
pub fn encoder_forward<R: Rng + ?Sized>(
    token_ids: &TokenIds,
    params: &EncoderParams,
    config: &ModelConfig,
    train_mode: bool,
    rng: Option<&mut R>,
) -> Result<HiddenSequence> {
    let needs_rng = train_mode && config.internal_dropout && config.dropout_keep < 1.0;
    if needs_rng && rng.is_none() {
        return Err(Error::input("train-mode dropout requires an rng"));
    }
    let rng = if needs_rng { rng } else { None };
    let trace = forward_trace(token_ids, params, config, rng)?;
    Ok(HiddenSequence { states: trace.output })
}

/// Deterministic evaluation-mode forward pass.
pub fn encode(token_ids: &TokenIds, params: &EncoderParams, config: &ModelConfig) -> Result<HiddenSequence> {
    encoder_forward::<rand_chacha::ChaCha8Rng>(token_ids, params, config, false, None)
}

fn attention_backward(
    layer: &LayerParams,
    input: &Array2<f64>,
    cache: &AttentionCache,
    d_output: &Array2<f64>,
    config: &ModelConfig,
    grad: &mut LayerParams,
) -> Array2<f64> {
    let d = config.head_size();
    let scale = 1.0 / (d as f64).sqrt();
    let d_context = layer.output.backward(&cache.context, d_output, &mut grad.output);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (head, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., head * d..(head + 1) * d];
        let dc = d_context.slice(cols);
        let dp = dc.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dc));
        let ds = softmax_backward(probs.view(), dp.view()) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let mut dx = layer.query.backward(input, &dq, &mut grad.query);
    dx += &layer.key.backward(input, &dk, &mut grad.key);
    dx += &layer.value.backward(input, &dv, &mut grad.value);
    dx
}

/// Gradient of the scores given the gradient of row-softmax probabilities.
fn softmax_backward(probs: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = &dp * &probs;
    for (mut row, p) in ds.rows_mut().into_iter().zip(probs.rows()) {
        let dot = row.sum();
        Zip::from(&mut row).and(&p).for_each(|r, &pi| *r -= pi * dot);
    }
    ds
}

/// Backpropagates `d_output` (gradient w.r.t. the final hidden states) and
/// accumulates every encoder parameter gradient into `grad`.
pub(crate) fn backward(
    token_ids: &TokenIds,
    params: &EncoderParams,
    config: &ModelConfig,
    trace: &EncoderTrace,
    d_output: Array2<f64>,
    grad: &mut EncoderParams,
) {
    let mut dz = d_output;
    for ((layer, t), g) in params
        .layers
        .iter()
        .zip(&trace.layers)
        .zip(grad.layers.iter_mut())
        .rev()
    {
        let db = layer_norm_backward(&dz, &t.ffn_norm, &layer.ffn_norm, &mut g.ffn_norm);
        let mut dffn = db.clone();
        if let Some(d) = &t.ffn_dropout {
            dffn *= d;
        }
        let dact = layer.ffn_out.backward(&t.ffn_act, &dffn, &mut g.ffn_out);
        let dpre = dact * &t.ffn_pre.mapv(gelu_derivative);
        let mut dy = layer.ffn_in.backward(&t.normed, &dpre, &mut g.ffn_in);
        dy += &db;
        let da = layer_norm_backward(&dy, &t.attention_norm, &layer.attention_norm, &mut g.attention_norm);
        let mut dattn = da.clone();
        if let Some(d) = &t.attention_dropout {
            dattn *= d;
        }
        let mut dx = attention_backward(layer, &t.input, &t.attention, &dattn, config, g);
        dx += &da;
        dz = dx;
    }
    for (j, (&id, row)) in token_ids.ids.iter().zip(dz.rows()).enumerate() {
        let mut tok = grad.token_embeddings.row_mut(id);
        tok += &row;
        let mut pos = grad.position_embeddings.row_mut(j);
        pos += &row;
    }
}
