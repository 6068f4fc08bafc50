//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it checks.

#![allow(dead_code)]

use ndarray::Array2;
use offense_core::classifier::ClassifierModel;
use offense_core::encoder::{EncoderState, Parameters, TokenSequence, TrainableEncoder};

/// Per-class F1 recounted from raw label lists.
pub fn brute_force_f1(gold: &[usize], pred: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    for c in 0..k {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for i in 0..gold.len() {
            match (gold[i] == c, pred[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        support.push(tp + fn_);
    }
    (f1, support)
}

pub fn brute_force_macro(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    let (f1, _) = brute_force_f1(gold, pred, k);
    f1.iter().sum::<f64>() / k as f64
}

pub fn brute_force_weighted(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let (f1, support) = brute_force_f1(gold, pred, k);
    f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / gold.len() as f64
}

/// Loss of one instance computed through the public prediction path.
pub fn instance_loss(model: &ClassifierModel<EncoderState>, tokens: &TokenSequence, gold: usize) -> f64 {
    let p = model.predict_proba_tokens(tokens).unwrap();
    offense_core::classifier::loss(&p, gold).unwrap()
}

/// Relative error `||a - n|| / max(||a||, ||n||)` for every parameter
/// tensor, comparing analytic gradients against central differences.
pub fn gradient_check(
    model: &ClassifierModel<EncoderState>,
    tokens: &TokenSequence,
    gold: usize,
    step: f64,
) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_gradients(tokens, gold).unwrap();
    let mut analytic: Vec<(String, Array2<f64>)> = grads
        .encoder
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    analytic.extend(grads.head.tensors().into_iter().map(|(n, t)| (n, t.clone())));

    let mut probe = model.clone();
    let mut out = Vec::new();
    for (tensor_idx, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Array2::zeros(a.raw_dim());
        for idx in ndarray::indices(a.raw_dim()) {
            let original = probe.parameter_tensors_mut()[tensor_idx].1[idx];
            probe.parameter_tensors_mut()[tensor_idx].1[idx] = original + step;
            let plus = instance_loss(&probe, tokens, gold);
            probe.parameter_tensors_mut()[tensor_idx].1[idx] = original - step;
            let minus = instance_loss(&probe, tokens, gold);
            probe.parameter_tensors_mut()[tensor_idx].1[idx] = original;
            numeric[idx] = (plus - minus) / (2.0 * step);
        }
        let norm = |t: &Array2<f64>| t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&(a - &numeric));
        let scale = norm(a).max(norm(&numeric));
        // Some gradients are identically zero (a key bias shifts every score
        // in a row equally); there only the absolute difference means anything.
        let rel = if scale < 1e-7 { diff } else { diff / scale };
        out.push((name.clone(), rel));
    }
    // the probe must have been restored exactly
    assert_eq!(&probe, model);
    out
}

/// The trainable tensors of an encoder in canonical order, for tests that
/// need to read parameter values by name.
pub fn encoder_tensor<'a>(state: &'a EncoderState, name: &str) -> &'a Array2<f64> {
    state
        .params()
        .tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .unwrap_or_else(|| panic!("no tensor {name}"))
}
