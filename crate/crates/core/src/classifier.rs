//! Softmax classification head over the CLS representation and joint
//! fine-tuning of encoder and head.
//!
//! `p(c | h) = softmax(W h + b)`, trained by minimizing `-log p(gold | h)`
//! with all encoder parameters and the head updated together.

use web_time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Dataset, LabelScheme};
use crate::encoder::{
    EncoderError, EncoderState, Parameters, SequenceEncoder, TokenSequence, TrainableEncoder,
};
use crate::evaluation::{self, EvaluationReport};

/// Floor applied to the gold probability inside the log.
pub const LOSS_EPSILON: f64 = 1e-12;
const HEAD_INIT_STD: f32 = 0.02;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label scheme mismatch: model has `{model}`, data has `{data}`")]
    SchemeMismatch { model: String, data: String },
    #[error("gold label {gold} out of range for {k} classes")]
    GoldOutOfRange { gold: usize, k: usize },
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (instance `{instance}`, loss {loss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        instance: String,
        loss: f64,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Task-specific parameters: `weight` is `k × H`, `bias` is `1 × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub weight: Array2<f64>,
    pub bias: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Normal,
    Zeros,
}

impl HeadState {
    pub fn zeros(k: usize, hidden: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((k, hidden)),
            bias: bias.then(|| Array2::zeros((1, k))),
        }
    }

    /// Weights from N(0, 0.02²) rounded to `f32`; bias at zero.
    pub fn seeded(k: usize, hidden: usize, bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, HEAD_INIT_STD).expect("valid std");
        let mut head = Self::zeros(k, hidden, bias);
        head.weight.mapv_inplace(|_| f64::from(normal.sample(&mut rng)));
        head
    }

    pub fn new_init(init: HeadInit, k: usize, hidden: usize, bias: bool, seed: u64) -> Self {
        match init {
            HeadInit::Normal => Self::seeded(k, hidden, bias, seed),
            HeadInit::Zeros => Self::zeros(k, hidden, bias),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, hidden: ArrayView1<'_, f64>) -> Array1<f64> {
        let z = self.weight.dot(&hidden);
        match &self.bias {
            Some(b) => z + b.row(0),
            None => z,
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter().flatten()).all(|v| v.is_finite())
    }
}

impl Parameters for HeadState {
    fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("head.weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("head.bias".to_string(), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![("head.weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("head.bias".to_string(), b));
        }
        out
    }
}

/// An encoder, a head sized for its scheme, and the scheme itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<E = EncoderState> {
    encoder: E,
    head: HeadState,
    scheme: LabelScheme,
}

impl<E: SequenceEncoder> ClassifierModel<E> {
    pub fn new(encoder: E, head: HeadState, scheme: LabelScheme) -> Result<Self, ClassifierError> {
        if head.num_classes() != scheme.len() {
            return Err(ClassifierError::Dimension(format!(
                "head has {} rows but scheme `{}` has {} classes",
                head.num_classes(),
                scheme.name(),
                scheme.len()
            )));
        }
        if head.hidden_size() != encoder.hidden_size() {
            return Err(ClassifierError::Dimension(format!(
                "head expects H = {}, encoder produces H = {}",
                head.hidden_size(),
                encoder.hidden_size()
            )));
        }
        if let Some(b) = &head.bias {
            if b.dim() != (1, scheme.len()) {
                return Err(ClassifierError::Dimension(format!("bias has shape {:?}", b.dim())));
            }
        }
        if !head.is_finite() {
            return Err(ClassifierError::Dimension("head has non-finite entries".into()));
        }
        Ok(Self {
            encoder,
            head,
            scheme,
        })
    }

    /// A model with a freshly initialized head for `scheme`.
    pub fn with_fresh_head(
        encoder: E,
        scheme: LabelScheme,
        init: HeadInit,
        bias: bool,
        seed: u64,
    ) -> Result<Self, ClassifierError> {
        let head = HeadState::new_init(init, scheme.len(), encoder.hidden_size(), bias, seed);
        Self::new(encoder, head, scheme)
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }

    pub fn head(&self) -> &HeadState {
        &self.head
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn into_parts(self) -> (E, HeadState, LabelScheme) {
        (self.encoder, self.head, self.scheme)
    }

    pub fn logits_tokens(&self, tokens: &TokenSequence) -> Result<Array1<f64>, ClassifierError> {
        let hidden = self.encoder.encode(tokens)?;
        Ok(self.head.logits(hidden.view()))
    }

    pub fn predict_proba_tokens(&self, tokens: &TokenSequence) -> Result<Vec<f64>, ClassifierError> {
        Ok(softmax(self.logits_tokens(tokens)?.as_slice().expect("contiguous")))
    }
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_proba<E: SequenceEncoder>(
    model: &ClassifierModel<E>,
    text: &str,
) -> Result<Vec<f64>, ClassifierError> {
    model.predict_proba_tokens(&model.encoder.tokenize(text))
}

pub fn predict<E: SequenceEncoder>(model: &ClassifierModel<E>, text: &str) -> Result<usize, ClassifierError> {
    Ok(argmax(&predict_proba(model, text)?))
}

/// `-ln(max(p[gold], 1e-12))`.
pub fn loss(proba: &[f64], gold: usize) -> Result<f64, ClassifierError> {
    if gold >= proba.len() {
        return Err(ClassifierError::GoldOutOfRange { gold, k: proba.len() });
    }
    let total: f64 = proba.iter().sum();
    if proba.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6 {
        return Err(ClassifierError::InvalidDistribution(format!("{proba:?}")));
    }
    Ok(-proba[gold].max(LOSS_EPSILON).ln())
}

/// Evaluates a model on a dataset with the model's own scheme.
pub fn evaluate<E: SequenceEncoder>(
    model: &ClassifierModel<E>,
    data: &Dataset,
    label: impl Into<String>,
) -> Result<EvaluationReport, ClassifierError> {
    check_scheme(model, data)?;
    let mut pred = Vec::with_capacity(data.len());
    for inst in data.instances() {
        pred.push(predict(model, &inst.text)?);
    }
    let report = EvaluationReport::evaluate(label, &data.labels(), &pred, data.scheme())
        .expect("labels validated by dataset and scheme");
    Ok(report)
}

fn check_scheme<E>(model: &ClassifierModel<E>, data: &Dataset) -> Result<(), ClassifierError> {
    if model.scheme != *data.scheme() {
        return Err(ClassifierError::SchemeMismatch {
            model: model.scheme.to_string(),
            data: data.scheme().to_string(),
        });
    }
    Ok(())
}

/// Gradients for one encoder/head pair, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<P> {
    pub encoder: P,
    pub head: HeadState,
}

impl<E: TrainableEncoder> ClassifierModel<E> {
    pub fn zero_gradients(&self) -> Gradients<E::Params> {
        Gradients {
            encoder: self.encoder.params().zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Forward and backward pass for one instance; adds its gradients into
    /// `grads` and returns the loss.
    ///
    /// `d loss / d logits = p - onehot(gold)`, so the head gradient is
    /// `(p - onehot(gold)) ⊗ h` and `d loss / d h = Wᵀ (p - onehot(gold))`.
    pub fn accumulate_gradients(
        &self,
        tokens: &TokenSequence,
        gold: usize,
        grads: &mut Gradients<E::Params>,
    ) -> Result<f64, ClassifierError> {
        let k = self.scheme.len();
        if gold >= k {
            return Err(ClassifierError::GoldOutOfRange { gold, k });
        }
        let (hidden, cache) = self.encoder.forward_train(tokens)?;
        let logits = self.head.logits(hidden.view());
        let proba = softmax(logits.as_slice().expect("contiguous"));
        // f64::max drops NaN, so it has to be caught before clamping
        let value = match proba[gold] {
            p if p.is_nan() => f64::NAN,
            p => -p.max(LOSS_EPSILON).ln(),
        };
        let mut d_logits = Array1::from(proba);
        d_logits[gold] -= 1.0;
        let outer = d_logits
            .view()
            .insert_axis(Axis(1))
            .dot(&hidden.view().insert_axis(Axis(0)));
        grads.head.weight += &outer;
        if let Some(b) = &mut grads.head.bias {
            let mut row = b.row_mut(0);
            row += &d_logits;
        }
        let d_hidden = self.head.weight.t().dot(&d_logits);
        self.encoder.backward(&cache, d_hidden.view(), &mut grads.encoder);
        Ok(value)
    }

    pub fn loss_and_gradients(
        &self,
        tokens: &TokenSequence,
        gold: usize,
    ) -> Result<(f64, Gradients<E::Params>), ClassifierError> {
        let mut grads = self.zero_gradients();
        let value = self.accumulate_gradients(tokens, gold, &mut grads)?;
        Ok((value, grads))
    }

    /// All trainable tensors, encoder first, then head.
    pub fn parameter_tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.encoder.params_mut().tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub optimizer: OptimizerKind,
    /// Fit on every instance instead of only the training split. The
    /// validation split is still scored, so its F1 is optimistic.
    pub fit_on_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            split_ratio: 0.8,
            optimizer: OptimizerKind::Adam,
            fit_on_all: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |msg: String| Err(ClassifierError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_macro_f1: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Highest validation macro F1; the earliest epoch wins ties.
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().reduce(|best, r| {
            if r.validation_macro_f1 > best.validation_macro_f1 {
                r
            } else {
                best
            }
        })
    }
}

/// Gradient-based parameter updates. Parameters are rounded to `f32` after
/// each step so that checkpoints store them exactly.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: i32,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: Vec<&Array2<f64>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.zip_mut_with(g, |x, &d| *x = (*x - lr * d) as f32 as f64);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                self.step += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.step);
                let c2 = 1.0 - Self::BETA2.powi(self.step);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    m.zip_mut_with(g, |m, &d| *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * d);
                    v.zip_mut_with(g, |v, &d| *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * d * d);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|x, &m, &v| {
                        let update = lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
                        *x = (*x - update) as f32 as f64;
                    });
                }
            }
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over (seed, epoch)
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fine-tunes encoder and head jointly for `cfg.epochs` passes of
/// mini-batch gradient descent, keeping the final epoch's weights.
///
/// `data` is split by `cfg.split_ratio` and `cfg.seed`; validation macro F1
/// is recorded after every epoch.
pub fn train<E: TrainableEncoder>(
    model: &ClassifierModel<E>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel<E>, TrainHistory), ClassifierError> {
    cfg.validate()?;
    check_scheme(model, data)?;
    let (train_split, validation) = corpus::split_dataset(data, cfg.split_ratio, cfg.seed)?;
    let fit_set = if cfg.fit_on_all { data } else { &train_split };
    let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    fit(model, fit_set, &validation, cfg, optimizer)
}

/// The epoch loop behind [`train`], with the optimizer supplied by the
/// caller. No config validation or splitting happens here.
pub fn fit<E: TrainableEncoder>(
    model: &ClassifierModel<E>,
    fit_set: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    mut optimizer: Optimizer,
) -> Result<(ClassifierModel<E>, TrainHistory), ClassifierError> {
    let mut model = model.clone();
    let examples: Vec<(TokenSequence, usize, &str)> = fit_set
        .instances()
        .iter()
        .map(|i| (model.encoder.tokenize(&i.text), i.label, i.id.as_str()))
        .collect();
    let mut history = TrainHistory::default();
    let batch_size = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = corpus::permutation(examples.len(), epoch_seed(cfg.seed, epoch));
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
            let mut grads = model.zero_gradients();
            for &i in batch {
                let (tokens, gold, id) = &examples[i];
                let value = model.accumulate_gradients(tokens, *gold, &mut grads)?;
                if !value.is_finite() {
                    return Err(ClassifierError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        instance: id.to_string(),
                        loss: value,
                    });
                }
                loss_sum += value;
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grad_tensors = grads.encoder.tensors();
            grad_tensors.extend(grads.head.tensors());
            let grad_refs: Vec<Array2<f64>> = grad_tensors.into_iter().map(|(_, g)| g * scale).collect();
            let params = model.parameter_tensors_mut().into_iter().map(|(_, p)| p).collect();
            optimizer.step(params, grad_refs.iter().collect());
        }
        let train_loss = if examples.is_empty() {
            0.0
        } else {
            loss_sum / examples.len() as f64
        };
        let validation_macro_f1 = if validation.is_empty() {
            0.0
        } else {
            evaluation::macro_f1(&evaluate(&model, validation, "validation")?.confusion)
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_macro_f1,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.6}, validation macro F1 {validation_macro_f1:.4}",
            cfg.epochs
        );
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_mini_encoder, EncoderConfig};
    use approx::assert_abs_diff_eq;

    fn scheme(k: usize) -> LabelScheme {
        LabelScheme::new("t", (0..k).map(|i| format!("c{i}"))).unwrap()
    }

    fn tiny_encoder() -> EncoderState {
        let config = EncoderConfig {
            vocab_size: 64,
            hidden_size: 8,
            num_layers: 1,
            num_heads: 2,
            ff_size: 16,
            max_len: 16,
            hash_seed: 0,
        };
        init_mini_encoder(&config, 3).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let model =
            ClassifierModel::with_fresh_head(tiny_encoder(), scheme(3), HeadInit::Zeros, true, 0).unwrap();
        let p = predict_proba(&model, "anything at all").unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_of_two_and_zero() {
        let p = softmax(&[2.0, 0.0]);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(p[0], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.880797, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.119203, epsilon = 1e-6);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0, -1e9]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert_abs_diff_eq!(loss(&[0.5, 0.5], 1).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(loss(&[0.25; 4], 2).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(loss(&[1.0, 0.0], 1).unwrap(), -LOSS_EPSILON.ln(), epsilon = 1e-12);
        assert!(matches!(loss(&[0.5, 0.5], 2), Err(ClassifierError::GoldOutOfRange { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(zero_epochs.validate(), Err(ClassifierError::InvalidConfig(_))));
        for lr in [0.0, -1.0, f64::NAN] {
            let cfg = TrainConfig {
                learning_rate: lr,
                ..TrainConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_dimension_checks() {
        let enc = tiny_encoder();
        let head = HeadState::zeros(3, 8, true);
        assert!(matches!(
            ClassifierModel::new(enc.clone(), head, scheme(2)),
            Err(ClassifierError::Dimension(_))
        ));
        let head = HeadState::zeros(2, 16, false);
        assert!(ClassifierModel::new(enc, head, scheme(2)).is_err());
    }

    #[test]
    fn head_gradient_is_outer_product() {
        let model =
            ClassifierModel::with_fresh_head(tiny_encoder(), scheme(3), HeadInit::Normal, true, 9).unwrap();
        let tokens = model.encoder().tokenize("a b c");
        let (_, grads) = model.loss_and_gradients(&tokens, 1).unwrap();
        let h = model.encoder().encode(&tokens).unwrap();
        let p = model.predict_proba_tokens(&tokens).unwrap();
        for (c, &pc) in p.iter().enumerate() {
            let delta = pc - if c == 1 { 1.0 } else { 0.0 };
            for j in 0..8 {
                assert_abs_diff_eq!(grads.head.weight[[c, j]], delta * h.0[j], epsilon = 1e-14);
            }
            assert_abs_diff_eq!(grads.head.bias.as_ref().unwrap()[[0, c]], delta, epsilon = 1e-14);
        }
    }

    #[test]
    fn best_and_final_epochs() {
        let rec = |epoch, f1| EpochRecord {
            epoch,
            train_loss: 0.0,
            validation_macro_f1: f1,
            wall_time_secs: 0.0,
        };
        let h = TrainHistory {
            epochs: vec![rec(1, 0.5), rec(2, 0.7), rec(3, 0.7), rec(4, 0.6)],
        };
        assert_eq!(h.best_epoch().unwrap().epoch, 2);
        assert_eq!(h.final_epoch().unwrap().epoch, 4);
        assert_eq!(h.to_jsonl().lines().count(), 4);
    }
}
