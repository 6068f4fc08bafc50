//! Synthetic bilingual corpora and a desk-scale transfer experiment.
//!
//! Each synthetic language has its own content vocabulary (`<code>17`,
//! `<code>203`, ...). Offensiveness is signaled by marker tokens whose
//! surface forms are shared by every language, so a hashing tokenizer maps
//! them to the same embeddings. Markers split into an overt group and a
//! covert group for the three-way aggression task.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, ClassifierError, ClassifierModel, HeadInit, TrainConfig};
use crate::corpus::{Dataset, LabelScheme, LabeledInstance, Source};
use crate::encoder::{init_mini_encoder, EncoderConfig, EncoderError};
use crate::evaluation::EvaluationReport;
use crate::transfer::{self, Checkpoint, SourceInfo, Strategy, TransferError};

pub const OVERT_MARKERS: [&str; 4] = ["<!x0>", "<!x1>", "<!x2>", "<!x3>"];
pub const COVERT_MARKERS: [&str; 4] = ["<~y0>", "<~y1>", "<~y2>", "<~y3>"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub fn offensive_scheme() -> LabelScheme {
    LabelScheme::new("offensive", ["offensive", "non-offensive"]).expect("valid scheme")
}

pub fn hate_scheme() -> LabelScheme {
    LabelScheme::new("hate-offensive", ["hate offensive", "non hate-offensive"]).expect("valid scheme")
}

pub fn aggression_scheme() -> LabelScheme {
    LabelScheme::new(
        "aggression",
        ["overtly aggressive", "covertly aggressive", "non aggressive"],
    )
    .expect("valid scheme")
}

/// Shape of generated sentences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    /// Prefix of every content word, e.g. `en` or `bn`.
    pub code: String,
    pub content_words: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl SyntheticLanguage {
    pub fn new(code: &str) -> Self {
        Self {
            code: code.to_string(),
            content_words: 300,
            min_words: 4,
            max_words: 9,
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, markers: &[&str]) -> String {
        let n = rng.random_range(self.min_words..=self.max_words);
        let mut words: Vec<String> = (0..n)
            .map(|_| format!("{}{}", self.code, rng.random_range(0..self.content_words)))
            .collect();
        for marker in markers {
            let at = rng.random_range(0..=words.len());
            words.insert(at, (*marker).to_string());
        }
        words.join(" ")
    }

    fn pick_markers<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> Vec<&'a str> {
        let count = rng.random_range(1..=2);
        (0..count).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
    }

    /// Binary offense data: class 0 sentences carry one or two markers drawn
    /// from both groups; class 1 sentences carry none. Classes alternate
    /// at random with equal probability.
    pub fn binary(&self, scheme: LabelScheme, n: usize, seed: u64, tag: &str) -> Dataset {
        assert_eq!(scheme.len(), 2, "binary data needs a two-class scheme");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<&str> = OVERT_MARKERS.iter().chain(&COVERT_MARKERS).copied().collect();
        let instances = (0..n)
            .map(|i| {
                let label = usize::from(rng.random_bool(0.5));
                let markers = if label == 0 {
                    Self::pick_markers(&mut rng, &pool)
                } else {
                    Vec::new()
                };
                LabeledInstance {
                    id: format!("{tag}-{i}"),
                    text: self.sentence(&mut rng, &markers),
                    label,
                }
            })
            .collect();
        Dataset::new(format!("synthetic-{}-{tag}", self.code), &self.code, Source::Synthetic, scheme, instances)
            .expect("generated data is valid")
    }

    /// Three-way aggression data: overt markers, covert markers, or none,
    /// with equal probability.
    pub fn aggression(&self, n: usize, seed: u64, tag: &str) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = (0..n)
            .map(|i| {
                let label = rng.random_range(0..3);
                let markers = match label {
                    0 => Self::pick_markers(&mut rng, &OVERT_MARKERS),
                    1 => Self::pick_markers(&mut rng, &COVERT_MARKERS),
                    _ => Vec::new(),
                };
                LabeledInstance {
                    id: format!("{tag}-{i}"),
                    text: self.sentence(&mut rng, &markers),
                    label,
                }
            })
            .collect();
        Dataset::new(
            format!("synthetic-{}-{tag}", self.code),
            &self.code,
            Source::Synthetic,
            aggression_scheme(),
            instances,
        )
        .expect("generated data is valid")
    }
}

/// Sizes and training settings for one transfer-versus-scratch comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSetup {
    pub encoder: EncoderConfig,
    pub source_language: SyntheticLanguage,
    pub target_language: SyntheticLanguage,
    pub source_size: usize,
    pub target_size: usize,
    pub heldout_size: usize,
    pub source_train: TrainConfig,
    /// Used for both the transferred and the from-scratch target model.
    pub target_train: TrainConfig,
}

impl Default for TransferSetup {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                vocab_size: 1024,
                hidden_size: 16,
                num_layers: 2,
                num_heads: 2,
                ff_size: 32,
                max_len: 16,
                hash_seed: 0,
            },
            source_language: SyntheticLanguage::new("en"),
            target_language: SyntheticLanguage::new("bn"),
            source_size: 2000,
            target_size: 50,
            heldout_size: 500,
            source_train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            target_train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 10,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub strategy: Strategy,
    pub transfer: EvaluationReport,
    pub scratch: EvaluationReport,
}

impl TransferSetup {
    fn fresh_model(&self, scheme: LabelScheme, seed: u64) -> Result<ClassifierModel, ExperimentError> {
        let encoder = init_mini_encoder(&self.encoder, seed)?;
        Ok(ClassifierModel::with_fresh_head(encoder, scheme, HeadInit::Normal, true, seed ^ 0x5eed)?)
    }

    /// Trains the source-language binary model and exports it with its head.
    pub fn train_source(&self, seed: u64) -> Result<Checkpoint, ExperimentError> {
        let data = self
            .source_language
            .binary(offensive_scheme(), self.source_size, seed, "source");
        let cfg = TrainConfig {
            seed,
            ..self.source_train.clone()
        };
        let (model, _) = classifier::train(&self.fresh_model(offensive_scheme(), seed)?, &data, &cfg)?;
        Ok(transfer::export_checkpoint(
            &model,
            true,
            SourceInfo {
                dataset: data.name().to_string(),
                train_config: Some(cfg),
                seed,
            },
        )?)
    }

    /// Target training and held-out data for a strategy: two-class hate
    /// data for full transfer, three-class aggression data for encoder-only.
    pub fn target_data(&self, strategy: Strategy, seed: u64) -> (Dataset, Dataset) {
        let lang = &self.target_language;
        let train_seed = seed.wrapping_add(1_000);
        let heldout_seed = seed.wrapping_add(2_000);
        match strategy {
            Strategy::Full => (
                lang.binary(hate_scheme(), self.target_size, train_seed, "target"),
                lang.binary(hate_scheme(), self.heldout_size, heldout_seed, "heldout"),
            ),
            Strategy::EncoderOnly => (
                lang.aggression(self.target_size, train_seed, "target"),
                lang.aggression(self.heldout_size, heldout_seed, "heldout"),
            ),
        }
    }

    /// Fine-tunes a transferred model and an identically configured
    /// from-scratch model on the same target data and scores both on the
    /// held-out set.
    pub fn run_trial(
        &self,
        source: &Checkpoint,
        strategy: Strategy,
        seed: u64,
    ) -> Result<TrialOutcome, ExperimentError> {
        let (target, heldout) = self.target_data(strategy, seed);
        let scheme = target.scheme().clone();
        let initial = match strategy {
            Strategy::Full => {
                let mapping = [
                    ("offensive".to_string(), "hate offensive".to_string()),
                    ("non-offensive".to_string(), "non hate-offensive".to_string()),
                ]
                .into();
                transfer::remap_head(transfer::import_full(source)?, &scheme, Some(&mapping))?
            }
            Strategy::EncoderOnly => transfer::import_encoder_only(source, &scheme, seed ^ 0x5eed)?,
        };
        let cfg = TrainConfig {
            seed,
            ..self.target_train.clone()
        };
        let (tl_model, _) = classifier::train(&initial, &target, &cfg)?;
        let (scratch_model, _) = classifier::train(&self.fresh_model(scheme, seed)?, &target, &cfg)?;
        Ok(TrialOutcome {
            seed,
            strategy,
            transfer: classifier::evaluate(&tl_model, &heldout, "transfer")?,
            scratch: classifier::evaluate(&scratch_model, &heldout, "scratch")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_balanced_enough() {
        let lang = SyntheticLanguage::new("es");
        let a = lang.binary(offensive_scheme(), 400, 3, "t");
        assert_eq!(a, lang.binary(offensive_scheme(), 400, 3, "t"));
        let counts = a.label_counts();
        assert!(counts[0] > 150 && counts[1] > 150, "{counts:?}");
        for inst in a.instances() {
            let has_marker = inst.text.contains("<!x") || inst.text.contains("<~y");
            assert_eq!(has_marker, inst.label == 0);
        }
    }

    #[test]
    fn aggression_markers_follow_labels() {
        let d = SyntheticLanguage::new("bn").aggression(300, 1, "t");
        for inst in d.instances() {
            let overt = inst.text.contains("<!x");
            let covert = inst.text.contains("<~y");
            match inst.label {
                0 => assert!(overt && !covert),
                1 => assert!(covert && !overt),
                _ => assert!(!overt && !covert),
            }
        }
    }

    #[test]
    fn languages_share_only_markers() {
        let en = SyntheticLanguage::new("en").binary(offensive_scheme(), 50, 1, "a");
        let bn = SyntheticLanguage::new("bn").binary(offensive_scheme(), 50, 1, "a");
        let words = |d: &Dataset| {
            d.instances()
                .iter()
                .flat_map(|i| i.text.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .collect::<std::collections::HashSet<_>>()
        };
        for shared in words(&en).intersection(&words(&bn)) {
            assert!(shared.starts_with('<'), "{shared}");
        }
    }
}
