//! Browser bindings: label-list scoring, a softmax explorer and a
//! transfer-versus-scratch trial on the synthetic corpus. Every export
//! returns a JSON string.

use offense_core::classifier::{argmax, softmax};
use offense_core::corpus::LabelScheme;
use offense_core::evaluation::EvaluationReport;
use offense_core::synthetic::TransferSetup;
use offense_core::transfer::Strategy;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn split(list: &str) -> impl Iterator<Item = &str> {
    list.split([',', ' ', '\n', '\t']).map(str::trim).filter(|s| !s.is_empty())
}

/// Labels may be class names or 0-based indices.
fn parse_labels(list: &str, scheme: &LabelScheme) -> Result<Vec<usize>, String> {
    split(list)
        .map(|tok| {
            scheme
                .index_of(tok)
                .or_else(|| tok.parse::<usize>().ok().filter(|&i| i < scheme.len()))
                .ok_or_else(|| format!("`{tok}` is not one of {:?}", scheme.classes()))
        })
        .collect()
}

pub fn score_labels(classes: &str, gold: &str, pred: &str) -> Result<String, String> {
    let scheme = LabelScheme::new("demo", split(classes)).map_err(|e| e.to_string())?;
    let gold = parse_labels(gold, &scheme)?;
    let pred = parse_labels(pred, &scheme)?;
    let report = EvaluationReport::evaluate("demo", &gold, &pred, &scheme).map_err(|e| e.to_string())?;
    Ok(json!({
        "report": report,
        "normalized": report.confusion.row_normalized(),
    })
    .to_string())
}

pub fn explore_softmax(logits: &str, shift: f64) -> Result<String, String> {
    let logits: Vec<f64> = split(logits)
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<_, _>>()?;
    if logits.is_empty() {
        return Err("enter at least one logit".into());
    }
    let p = softmax(&logits);
    let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
    let q = softmax(&shifted);
    Ok(json!({
        "probabilities": p,
        "sum": p.iter().sum::<f64>(),
        "argmax": argmax(&p),
        "shifted_probabilities": q,
        "shifted_argmax": argmax(&q),
    })
    .to_string())
}

pub fn run_transfer_trial(seed: u64, strategy: &str, target_size: usize) -> Result<String, String> {
    let strategy = match strategy {
        "full" => Strategy::Full,
        "encoder_only" => Strategy::EncoderOnly,
        other => return Err(format!("unknown strategy `{other}`")),
    };
    if target_size < 10 {
        return Err("target size must be at least 10".into());
    }
    let setup = TransferSetup {
        target_size,
        ..TransferSetup::default()
    };
    let source = setup.train_source(seed).map_err(|e| e.to_string())?;
    let outcome = setup.run_trial(&source, strategy, seed).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&outcome).expect("outcome serializes"))
}

#[wasm_bindgen(js_name = scoreLabels)]
pub fn score_labels_js(classes: &str, gold: &str, pred: &str) -> Result<String, JsError> {
    score_labels(classes, gold, pred).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = exploreSoftmax)]
pub fn explore_softmax_js(logits: &str, shift: f64) -> Result<String, JsError> {
    explore_softmax(logits, shift).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = transferTrial)]
pub fn transfer_trial_js(seed: u32, strategy: &str, target_size: u32) -> Result<String, JsError> {
    run_transfer_trial(seed.into(), strategy, target_size as usize).map_err(|e| JsError::new(&e))
}
