//! Sequence encoders: token ids in, the final hidden state of the `[CLS]`
//! position out.
//!
//! The [`SequenceEncoder`] trait is the contract the classifier and the
//! evaluation code compile against. [`EncoderState`] is a miniature
//! post-LayerNorm transformer encoder that satisfies it at desk scale and
//! exposes exact gradients for fine-tuning. Pretrained cross-lingual
//! encoders plug in by implementing the same traits.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
/// Ids below this value are reserved for special tokens.
pub const RESERVED_IDS: u32 = 3;
pub const DEFAULT_MAX_LEN: usize = 512;

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    OutOfVocabulary {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("sequence of length {len} exceeds the encoder's {max_len} positions")]
    TooLong { len: usize, max_len: usize },
    #[error("token sequence must start with the CLS id")]
    MissingCls,
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter set does not match the config: {0}")]
    ParameterSet(String),
    #[error("config fingerprint mismatch: recorded {recorded}, computed {computed}")]
    FingerprintMismatch { recorded: String, computed: String },
    #[error("encoder produced a non-finite hidden state")]
    NonFinite,
}

/// Token ids fed to an encoder. The first id is always [`CLS_ID`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self, EncoderError> {
        if ids.first() != Some(&CLS_ID) {
            return Err(EncoderError::MissingCls);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Never true: a sequence holds at least the CLS marker.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whitespace tokenizer hashing each token into a fixed vocabulary.
///
/// Identical surface strings map to identical ids regardless of language,
/// so tokens shared between languages share embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
    seed: u64,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize, seed: u64) -> Result<Self, EncoderError> {
        if vocab_size <= RESERVED_IDS as usize {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size must exceed the {RESERVED_IDS} reserved ids, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size, seed })
    }

    pub fn token_id(&self, token: &str) -> u32 {
        // FNV-1a over the seed followed by the token bytes.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let buckets = (self.vocab_size - RESERVED_IDS as usize) as u64;
        RESERVED_IDS + (hash % buckets) as u32
    }

    /// `[CLS]` followed by one id per whitespace token, truncated at the
    /// tail to `max_len` ids. `max_len` below 2 is raised to 2.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let max_len = max_len.max(2);
        let ids = std::iter::once(CLS_ID)
            .chain(text.split_whitespace().map(|t| self.token_id(t)))
            .take(max_len)
            .collect();
        TokenSequence(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    /// Number of learned positions; also the tokenizer's truncation length.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub hash_seed: u64,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            hidden_size: 16,
            num_layers: 2,
            num_heads: 2,
            ff_size: 32,
            max_len: DEFAULT_MAX_LEN,
            hash_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(EncoderError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= RESERVED_IDS as usize {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size must exceed {RESERVED_IDS}, got {}",
                self.vocab_size
            )));
        }
        if self.max_len < 2 {
            return Err(EncoderError::InvalidConfig("max_len must be at least 2".into()));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn tokenizer(&self) -> Result<HashTokenizer, EncoderError> {
        HashTokenizer::new(self.vocab_size, self.hash_seed)
    }

    /// Parameter names and shapes in canonical (serialization) order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden_size;
        let f = self.ff_size;
        let mut shapes = vec![
            ("embeddings.token".to_string(), (self.vocab_size, h)),
            ("embeddings.position".to_string(), (self.max_len, h)),
        ];
        for layer in 0..self.num_layers {
            let p = format!("layers.{layer}");
            for (name, shape) in [
                ("attention.query.weight", (h, h)),
                ("attention.query.bias", (1, h)),
                ("attention.key.weight", (h, h)),
                ("attention.key.bias", (1, h)),
                ("attention.value.weight", (h, h)),
                ("attention.value.bias", (1, h)),
                ("attention.output.weight", (h, h)),
                ("attention.output.bias", (1, h)),
                ("attention_norm.gain", (1, h)),
                ("attention_norm.shift", (1, h)),
                ("feed_forward.input.weight", (h, f)),
                ("feed_forward.input.bias", (1, f)),
                ("feed_forward.output.weight", (f, h)),
                ("feed_forward.output.bias", (1, h)),
                ("feed_forward_norm.gain", (1, h)),
                ("feed_forward_norm.shift", (1, h)),
            ] {
                shapes.push((format!("{p}.{name}"), shape));
            }
        }
        shapes
    }
}

/// Access to a model's parameter tensors in a fixed, named order.
///
/// Gradients use the same type as the parameters they belong to, so an
/// optimizer can zip the two lists.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Array2<f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut zeros = self.clone();
        for (_, t) in zeros.tensors_mut() {
            t.fill(0.0);
        }
        zeros
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(in, out)`; applied as `x · weight + bias`.
    pub weight: Array2<f64>,
    /// `(1, out)`.
    pub bias: Array2<f64>,
}

impl Linear {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grads`, returns `d input`.
    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(dy);
        grads.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub shift: Array2<f64>,
}

struct NormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let width = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / width;
            *istd = 1.0 / (var + NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * *istd);
        }
        let out = &normalized * &self.gain + &self.shift;
        (out, NormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grads: &mut LayerNorm) -> Array2<f64> {
        grads.gain += &(dy * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        grads.shift += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_norm = dy * &self.gain;
        let width = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = d_norm.row(i);
            let xh = cache.normalized.row(i);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let scale = cache.inv_std[i] / width;
            for j in 0..out.len() {
                out[j] = scale * (width * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNorm,
    pub ff_input: Linear,
    pub ff_output: Linear,
    pub ff_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.extend([
                (format!("{p}.attention.query.weight"), &l.query.weight),
                (format!("{p}.attention.query.bias"), &l.query.bias),
                (format!("{p}.attention.key.weight"), &l.key.weight),
                (format!("{p}.attention.key.bias"), &l.key.bias),
                (format!("{p}.attention.value.weight"), &l.value.weight),
                (format!("{p}.attention.value.bias"), &l.value.bias),
                (format!("{p}.attention.output.weight"), &l.output.weight),
                (format!("{p}.attention.output.bias"), &l.output.bias),
                (format!("{p}.attention_norm.gain"), &l.attention_norm.gain),
                (format!("{p}.attention_norm.shift"), &l.attention_norm.shift),
                (format!("{p}.feed_forward.input.weight"), &l.ff_input.weight),
                (format!("{p}.feed_forward.input.bias"), &l.ff_input.bias),
                (format!("{p}.feed_forward.output.weight"), &l.ff_output.weight),
                (format!("{p}.feed_forward.output.bias"), &l.ff_output.bias),
                (format!("{p}.feed_forward_norm.gain"), &l.ff_norm.gain),
                (format!("{p}.feed_forward_norm.shift"), &l.ff_norm.shift),
            ]);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.token_embeddings),
            ("embeddings.position".to_string(), &mut self.position_embeddings),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            out.extend([
                (format!("{p}.attention.query.weight"), &mut l.query.weight),
                (format!("{p}.attention.query.bias"), &mut l.query.bias),
                (format!("{p}.attention.key.weight"), &mut l.key.weight),
                (format!("{p}.attention.key.bias"), &mut l.key.bias),
                (format!("{p}.attention.value.weight"), &mut l.value.weight),
                (format!("{p}.attention.value.bias"), &mut l.value.bias),
                (format!("{p}.attention.output.weight"), &mut l.output.weight),
                (format!("{p}.attention.output.bias"), &mut l.output.bias),
                (format!("{p}.attention_norm.gain"), &mut l.attention_norm.gain),
                (format!("{p}.attention_norm.shift"), &mut l.attention_norm.shift),
                (format!("{p}.feed_forward.input.weight"), &mut l.ff_input.weight),
                (format!("{p}.feed_forward.input.bias"), &mut l.ff_input.bias),
                (format!("{p}.feed_forward.output.weight"), &mut l.ff_output.weight),
                (format!("{p}.feed_forward.output.bias"), &mut l.ff_output.bias),
                (format!("{p}.feed_forward_norm.gain"), &mut l.ff_norm.gain),
                (format!("{p}.feed_forward_norm.shift"), &mut l.ff_norm.shift),
            ]);
        }
        out
    }
}

impl EncoderParams {
    /// Builds a parameter set from tensors listed in canonical order.
    pub fn from_tensors(
        config: &EncoderConfig,
        tensors: Vec<(String, Array2<f64>)>,
    ) -> Result<Self, EncoderError> {
        let shapes = config.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(EncoderError::ParameterSet(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut params = Self::zeros(config);
        for ((name, slot), (given_name, tensor)) in params.tensors_mut().into_iter().zip(tensors) {
            if name != given_name {
                return Err(EncoderError::ParameterSet(format!(
                    "expected tensor `{name}`, found `{given_name}`"
                )));
            }
            if slot.dim() != tensor.dim() {
                return Err(EncoderError::ShapeMismatch {
                    name,
                    expected: slot.dim(),
                    found: tensor.dim(),
                });
            }
            *slot = tensor;
        }
        Ok(params)
    }

    fn zeros(config: &EncoderConfig) -> Self {
        let h = config.hidden_size;
        let f = config.ff_size;
        let linear = |i: usize, o: usize| Linear {
            weight: Array2::zeros((i, o)),
            bias: Array2::zeros((1, o)),
        };
        let norm = || LayerNorm {
            gain: Array2::ones((1, h)),
            shift: Array2::zeros((1, h)),
        };
        Self {
            token_embeddings: Array2::zeros((config.vocab_size, h)),
            position_embeddings: Array2::zeros((config.max_len, h)),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    query: linear(h, h),
                    key: linear(h, h),
                    value: linear(h, h),
                    output: linear(h, h),
                    attention_norm: norm(),
                    ff_input: linear(h, f),
                    ff_output: linear(f, h),
                    ff_norm: norm(),
                })
                .collect(),
        }
    }
}

/// Final-layer hidden state at the CLS position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenRepresentation(pub Array1<f64>);

impl HiddenRepresentation {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// The contract downstream code uses: text to tokens, tokens to the CLS
/// representation.
pub trait SequenceEncoder {
    fn hidden_size(&self) -> usize;

    fn tokenize(&self, text: &str) -> TokenSequence;

    fn encode(&self, tokens: &TokenSequence) -> Result<HiddenRepresentation, EncoderError>;
}

/// An encoder that can be fine-tuned jointly with a classification head.
pub trait TrainableEncoder: SequenceEncoder + Clone {
    type Params: Parameters + Clone;
    type Cache;

    fn params(&self) -> &Self::Params;

    fn params_mut(&mut self) -> &mut Self::Params;

    fn forward_train(
        &self,
        tokens: &TokenSequence,
    ) -> Result<(HiddenRepresentation, Self::Cache), EncoderError>;

    /// Accumulates `d loss / d params` into `grads` given `d loss / d h`.
    fn backward(&self, cache: &Self::Cache, d_hidden: ArrayView1<'_, f64>, grads: &mut Self::Params);
}

/// The miniature encoder: configuration, parameters and config fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    config: EncoderConfig,
    params: EncoderParams,
    fingerprint: String,
    tokenizer: HashTokenizer,
}

impl fmt::Display for EncoderState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        write!(
            f,
            "mini encoder (vocab {}, H {}, {} layers, {} heads, ff {}, fingerprint {})",
            c.vocab_size,
            c.hidden_size,
            c.num_layers,
            c.num_heads,
            c.ff_size,
            &self.fingerprint[..12]
        )
    }
}

/// Seeded initialization of the mini encoder. Weights are drawn from
/// N(0, 0.02²) and rounded to `f32`, biases start at zero and norm gains at
/// one.
pub fn init_mini_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderState, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD as f32).expect("valid std");
    let mut params = EncoderParams::zeros(config);
    for (name, tensor) in params.tensors_mut() {
        if name.ends_with(".weight") || name.starts_with("embeddings.") {
            tensor.mapv_inplace(|_| f64::from(normal.sample(&mut rng)));
        }
    }
    EncoderState::from_parts(config.clone(), params, None)
}

impl EncoderState {
    /// Assembles a state, checking shapes and, when given, the recorded
    /// fingerprint.
    pub fn from_parts(
        config: EncoderConfig,
        params: EncoderParams,
        recorded_fingerprint: Option<&str>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let computed = config.fingerprint();
        if let Some(recorded) = recorded_fingerprint {
            if recorded != computed {
                return Err(EncoderError::FingerprintMismatch {
                    recorded: recorded.to_string(),
                    computed,
                });
            }
        }
        let expected = config.parameter_shapes();
        let actual = params.tensors();
        if expected.len() != actual.len() {
            return Err(EncoderError::ParameterSet(format!(
                "expected {} tensors, got {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, tensor)) in expected.iter().zip(&actual) {
            if tensor.dim() != *shape {
                return Err(EncoderError::ShapeMismatch {
                    name: name.clone(),
                    expected: *shape,
                    found: tensor.dim(),
                });
            }
        }
        let tokenizer = config.tokenizer()?;
        Ok(Self {
            config,
            params,
            fingerprint: computed,
            tokenizer,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    pub fn tokenize_with(&self, text: &str, max_len: usize) -> TokenSequence {
        self.tokenizer.tokenize(text, max_len.min(self.config.max_len))
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<(), EncoderError> {
        let ids = tokens.ids();
        if ids.first() != Some(&CLS_ID) {
            return Err(EncoderError::MissingCls);
        }
        if ids.len() > self.config.max_len {
            return Err(EncoderError::TooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some((position, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(EncoderError::OutOfVocabulary {
                id,
                position,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn forward(&self, tokens: &TokenSequence) -> Result<(Array2<f64>, ForwardCache), EncoderError> {
        self.check_tokens(tokens)?;
        let ids = tokens.ids();
        let h = self.config.hidden_size;
        let mut x = Array2::zeros((ids.len(), h));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &self.params.token_embeddings.row(id as usize);
            row += &self.params.position_embeddings.row(i);
        }
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (out, cache) = layer_forward(layer, self.config.num_heads, x);
            layers.push(cache);
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                ids: ids.to_vec(),
                layers,
            },
        ))
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attention_norm: NormCache,
    after_attention: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_norm: NormCache,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

fn layer_forward(p: &LayerParams, num_heads: usize, input: Array2<f64>) -> (Array2<f64>, LayerCache) {
    let (len, h) = input.dim();
    let head_dim = h / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = p.query.forward(&input);
    let k = p.key.forward(&input);
    let v = p.value.forward(&input);
    let mut context = Array2::zeros((len, h));
    let mut probs = Vec::with_capacity(num_heads);
    for head in 0..num_heads {
        let cols = s![.., head * head_dim..(head + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let attended = p.output.forward(&context);
    let (after_attention, attention_norm) = p.attention_norm.forward(&(&input + &attended));
    let ff_pre = p.ff_input.forward(&after_attention);
    let ff_act = ff_pre.mapv(gelu);
    let ff_out = p.ff_output.forward(&ff_act);
    let (out, ff_norm) = p.ff_norm.forward(&(&after_attention + &ff_out));
    let cache = LayerCache {
        input,
        q,
        k,
        v,
        probs,
        context,
        attention_norm,
        after_attention,
        ff_pre,
        ff_act,
        ff_norm,
    };
    (out, cache)
}

fn layer_backward(
    p: &LayerParams,
    num_heads: usize,
    cache: &LayerCache,
    d_out: &Array2<f64>,
    g: &mut LayerParams,
) -> Array2<f64> {
    let h = d_out.ncols();
    let head_dim = h / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let d_ff_sum = p.ff_norm.backward(&cache.ff_norm, d_out, &mut g.ff_norm);
    let d_ff_act = p.ff_output.backward(&cache.ff_act, &d_ff_sum, &mut g.ff_output);
    let d_ff_pre = &d_ff_act * &cache.ff_pre.mapv(gelu_grad);
    let d_after_attention =
        &d_ff_sum + &p.ff_input.backward(&cache.after_attention, &d_ff_pre, &mut g.ff_input);

    let d_attn_sum = p
        .attention_norm
        .backward(&cache.attention_norm, &d_after_attention, &mut g.attention_norm);
    let d_context = p.output.backward(&cache.context, &d_attn_sum, &mut g.output);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (head, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., head * head_dim..(head + 1) * head_dim];
        let d_ctx = d_context.slice(cols);
        let d_probs = d_ctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx));
        let mut d_scores = d_probs;
        for (mut row, prow) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
            let inner = row.dot(&prow);
            row.zip_mut_with(&prow, |d, &a| *d = a * (*d - inner));
        }
        dq.slice_mut(cols).assign(&(d_scores.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(d_scores.t().dot(&cache.q.slice(cols)) * scale));
    }
    let mut d_input = d_attn_sum;
    d_input += &p.query.backward(&cache.input, &dq, &mut g.query);
    d_input += &p.key.backward(&cache.input, &dk, &mut g.key);
    d_input += &p.value.backward(&cache.input, &dv, &mut g.value);
    d_input
}

impl SequenceEncoder for EncoderState {
    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenizer.tokenize(text, self.config.max_len)
    }

    fn encode(&self, tokens: &TokenSequence) -> Result<HiddenRepresentation, EncoderError> {
        let (out, _) = self.forward(tokens)?;
        let hidden = HiddenRepresentation(out.row(0).to_owned());
        if !hidden.is_finite() {
            return Err(EncoderError::NonFinite);
        }
        Ok(hidden)
    }
}

impl TrainableEncoder for EncoderState {
    type Params = EncoderParams;
    type Cache = ForwardCache;

    fn params(&self) -> &EncoderParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    fn forward_train(
        &self,
        tokens: &TokenSequence,
    ) -> Result<(HiddenRepresentation, ForwardCache), EncoderError> {
        let (out, cache) = self.forward(tokens)?;
        Ok((HiddenRepresentation(out.row(0).to_owned()), cache))
    }

    fn backward(&self, cache: &ForwardCache, d_hidden: ArrayView1<'_, f64>, grads: &mut EncoderParams) {
        let mut d_x = Array2::zeros((cache.ids.len(), self.config.hidden_size));
        d_x.row_mut(0).assign(&d_hidden);
        for ((layer, layer_cache), layer_grads) in self
            .params
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            d_x = layer_backward(layer, self.config.num_heads, layer_cache, &d_x, layer_grads);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = d_x.row(i);
            let mut tok = grads.token_embeddings.row_mut(id as usize);
            tok += &row;
            let mut pos = grads.position_embeddings.row_mut(i);
            pos += &row;
        }
    }
}
