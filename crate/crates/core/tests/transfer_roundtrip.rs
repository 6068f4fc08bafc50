use std::collections::BTreeMap;

use offense_core::classifier::{predict_proba, train, ClassifierModel, HeadInit, TrainConfig};
use offense_core::encoder::{init_mini_encoder, EncoderConfig, Parameters, TrainableEncoder};
use offense_core::synthetic::{aggression_scheme, hate_scheme, offensive_scheme, SyntheticLanguage};
use offense_core::transfer::{
    export_checkpoint, import_encoder_only, import_full, remap_head, Checkpoint, ReadMode, SourceInfo,
    TransferError,
};

fn config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 512,
        hidden_size: 16,
        num_layers: 2,
        num_heads: 2,
        ff_size: 32,
        max_len: 12,
        hash_seed: 3,
    }
}

fn source_info() -> SourceInfo {
    SourceInfo {
        dataset: "synthetic-en".into(),
        train_config: Some(TrainConfig::default()),
        seed: 7,
    }
}

/// A briefly fine-tuned English model, so the weights are not just the init.
fn trained_english() -> ClassifierModel {
    let start = ClassifierModel::with_fresh_head(
        init_mini_encoder(&config(), 7).unwrap(),
        offensive_scheme(),
        HeadInit::Normal,
        true,
        7,
    )
    .unwrap();
    let data = SyntheticLanguage::new("en").binary(offensive_scheme(), 60, 7, "src");
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    train(&start, &data, &cfg).unwrap().0
}

fn bits(t: &ndarray::Array2<f64>) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

fn encoder_bits(m: &ClassifierModel) -> Vec<Vec<u64>> {
    m.encoder().params().tensors().into_iter().map(|(_, t)| bits(t)).collect()
}

fn encoder_byte_len(ckpt: &Checkpoint) -> usize {
    let bytes = ckpt.to_bytes();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let floats: usize = ckpt.encoder.config().parameter_shapes().iter().map(|(_, (r, c))| r * c).sum();
    20 + header_len + 4 * floats
}

#[test]
fn export_import_export_is_byte_identical() {
    let model = trained_english();
    let first = export_checkpoint(&model, true, source_info()).unwrap().without_timestamp();
    let restored = import_full(&Checkpoint::from_bytes(&first.to_bytes()).unwrap()).unwrap();
    assert_eq!(restored, model);
    let second = export_checkpoint(&restored, true, source_info()).unwrap().without_timestamp();
    assert_eq!(first.to_bytes(), second.to_bytes());
}

#[test]
fn saved_model_predicts_identically() {
    let model = trained_english();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    export_checkpoint(&model, true, source_info()).unwrap().save(&path).unwrap();
    let restored = import_full(&Checkpoint::load(&path).unwrap()).unwrap();
    let probes = SyntheticLanguage::new("en").binary(offensive_scheme(), 100, 99, "probe");
    for inst in probes.instances() {
        let a = predict_proba(&model, &inst.text).unwrap();
        let b = predict_proba(&restored, &inst.text).unwrap();
        assert_eq!(a, b, "{}", inst.text);
    }
}

#[test]
fn encoder_only_read_stops_before_the_head() {
    let ckpt = export_checkpoint(&trained_english(), true, source_info()).unwrap();
    let bytes = ckpt.to_bytes();
    let cut = &bytes[..encoder_byte_len(&ckpt)];
    let partial = Checkpoint::read_from(cut, ReadMode::EncoderOnly).unwrap();
    assert!(partial.head.is_none());
    assert_eq!(partial.encoder, ckpt.encoder);
    assert!(matches!(Checkpoint::from_bytes(cut), Err(TransferError::Malformed(_))));

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(TransferError::Malformed(_))));
}

#[test]
fn corrupted_files_are_rejected() {
    let ckpt = export_checkpoint(&trained_english(), true, source_info()).unwrap();
    let bytes = ckpt.to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(TransferError::BadMagic)));

    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad_version),
        Err(TransferError::VersionMismatch { found: 9, expected: 1 })
    ));

    // Swap the stored fingerprint for another of the same length.
    let fp = ckpt.encoder.fingerprint().to_string();
    let fake: String = fp.chars().rev().collect();
    assert_ne!(fp, fake);
    let text = replace_bytes(&bytes, fp.as_bytes(), fake.as_bytes());
    let err = Checkpoint::from_bytes(&text).unwrap_err();
    assert!(err.to_string().contains("fingerprint"), "{err}");
}

fn replace_bytes(haystack: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    let mut out = haystack.to_vec();
    let mut i = 0;
    while i + from.len() <= out.len() {
        if &out[i..i + from.len()] == from {
            out[i..i + from.len()].copy_from_slice(to);
            i += from.len();
        } else {
            i += 1;
        }
    }
    out
}

#[test]
fn full_transfer_keeps_weights_and_follows_a_mapping() {
    let model = trained_english();
    let ckpt = export_checkpoint(&model, true, source_info()).unwrap();
    let positional = remap_head(import_full(&ckpt).unwrap(), &hate_scheme(), None).unwrap();
    assert_eq!(positional.scheme(), &hate_scheme());
    assert_eq!(bits(&positional.head().weight), bits(&model.head().weight));
    assert_eq!(encoder_bits(&positional), encoder_bits(&model));

    let swapped: BTreeMap<String, String> = [
        ("offensive".to_string(), "non hate-offensive".to_string()),
        ("non-offensive".to_string(), "hate offensive".to_string()),
    ]
    .into();
    let crossed = remap_head(import_full(&ckpt).unwrap(), &hate_scheme(), Some(&swapped)).unwrap();
    assert_eq!(crossed.head().weight.row(0), model.head().weight.row(1));
    let probe = "en_w3 <!x1> en_w8";
    let p = predict_proba(&model, probe).unwrap();
    let q = predict_proba(&crossed, probe).unwrap();
    assert_eq!(p[0], q[1]);
    assert_eq!(p[1], q[0]);

    let broken: BTreeMap<String, String> = [("offensive".to_string(), "hateful".to_string())].into();
    assert!(matches!(
        remap_head(import_full(&ckpt).unwrap(), &hate_scheme(), Some(&broken)),
        Err(TransferError::LabelMapping(_))
    ));
}

#[test]
fn two_to_three_classes() {
    let model = trained_english();
    let ckpt = export_checkpoint(&model, true, source_info()).unwrap();
    assert!(matches!(
        remap_head(import_full(&ckpt).unwrap(), &aggression_scheme(), None),
        Err(TransferError::ClassCountMismatch { source_k: 2, target_k: 3 })
    ));

    let a = import_encoder_only(&ckpt, &aggression_scheme(), 5).unwrap();
    let b = import_encoder_only(&ckpt, &aggression_scheme(), 5).unwrap();
    let c = import_encoder_only(&ckpt, &aggression_scheme(), 6).unwrap();
    assert_eq!(encoder_bits(&a), encoder_bits(&model));
    assert_eq!(a.head().weight.dim(), (3, 16));
    assert_eq!(a.head().bias.as_ref().unwrap().dim(), (1, 3));
    assert_eq!(a, b);
    assert_ne!(bits(&a.head().weight), bits(&c.head().weight));
    let source_rows = bits(&model.head().weight);
    assert_ne!(bits(&a.head().weight)[..source_rows.len()], source_rows[..]);
}

#[test]
fn encoder_only_export_has_no_head() {
    let ckpt = export_checkpoint(&trained_english(), false, source_info()).unwrap();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert!(back.head.is_none());
    assert!(matches!(import_full(&back), Err(TransferError::MissingHead)));
    assert_eq!(back.provenance.source_dataset, "synthetic-en");
    assert_eq!(back.provenance.encoder_fingerprint, config().fingerprint());
}
