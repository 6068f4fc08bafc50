//! Shared-task datasets: label schemes, profile-driven TSV loading,
//! seeded splitting and the majority-class baseline.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::evaluation::{EvaluationError, EvaluationReport};

/// Profile registry shipped with the crate.
pub const BUILTIN_REGISTRY: &str = include_str!("../profiles/registry.json");
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        expected: String,
        found: usize,
    },
    #[error("{path}:{line}: row `{id}` has unknown label `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        id: String,
        label: String,
    },
    #[error("{path}:{line}: row `{id}` has empty text")]
    EmptyText { path: PathBuf, line: usize, id: String },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("instance `{id}` has label {label}, outside the {k}-class scheme")]
    InvalidLabel { id: String, label: usize, k: usize },
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("unknown dataset profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid profile registry: {0}")]
    Registry(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("label schemes differ: `{left}` vs `{right}`")]
    SchemeMismatch { left: String, right: String },
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

/// Ordered class names; a class index is its position in the list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct LabelScheme {
    name: String,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    name: String,
    classes: Vec<String>,
}

impl TryFrom<RawScheme> for LabelScheme {
    type Error = CorpusError;

    fn try_from(raw: RawScheme) -> Result<Self, Self::Error> {
        LabelScheme::new(raw.name, raw.classes)
    }
}

impl From<LabelScheme> for RawScheme {
    fn from(s: LabelScheme) -> Self {
        RawScheme {
            name: s.name,
            classes: s.classes,
        }
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        classes: impl IntoIterator<Item = S>,
    ) -> Result<Self, CorpusError> {
        let name = name.into();
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.len() < 2 {
            return Err(CorpusError::InvalidScheme(format!(
                "`{name}` needs at least two classes"
            )));
        }
        let mut seen = HashSet::new();
        for class in &classes {
            if class.trim().is_empty() {
                return Err(CorpusError::InvalidScheme(format!("`{name}` has an empty class name")));
            }
            if !seen.insert(class.as_str()) {
                return Err(CorpusError::InvalidScheme(format!(
                    "`{name}` repeats class `{class}`"
                )));
            }
        }
        Ok(Self { name, classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.name, self.classes.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Twitter,
    Facebook,
    /// Generated data used for desk-scale experiments.
    Synthetic,
}

/// An immutable, validated collection of labeled instances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    language: String,
    source: Source,
    scheme: LabelScheme,
    instances: Vec<LabeledInstance>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        language: impl Into<String>,
        source: Source,
        scheme: LabelScheme,
        instances: Vec<LabeledInstance>,
    ) -> Result<Self, CorpusError> {
        let k = scheme.len();
        let mut ids = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.label >= k {
                return Err(CorpusError::InvalidLabel {
                    id: inst.id.clone(),
                    label: inst.label,
                    k,
                });
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(CorpusError::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            language: language.into(),
            source,
            scheme,
            instances,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    /// Per-class instance counts.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.scheme.len()];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    fn derive(&self, suffix: &str, instances: Vec<LabeledInstance>) -> Self {
        Self {
            name: format!("{}/{suffix}", self.name),
            language: self.language.clone(),
            source: self.source,
            scheme: self.scheme.clone(),
            instances,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub id: usize,
    pub text: usize,
    pub label: usize,
}

/// How one shared task lays out its files and names its labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub language: String,
    pub source: Source,
    pub columns: ColumnLayout,
    /// Accepted numbers of tab-separated columns per row.
    pub column_counts: Vec<usize>,
    /// A first row whose label column holds this value is a header.
    #[serde(default)]
    pub header_label: Option<String>,
    pub scheme: LabelScheme,
    /// Raw label string to scheme class name.
    pub labels: BTreeMap<String, String>,
}

impl DatasetProfile {
    fn validate(&self) -> Result<(), CorpusError> {
        let err = |msg: String| Err(CorpusError::Registry(format!("profile `{}`: {msg}", self.name)));
        let max_col = self.columns.id.max(self.columns.text).max(self.columns.label);
        if self.column_counts.is_empty() || self.column_counts.iter().any(|&c| c <= max_col) {
            return err("column counts must cover the id, text and label columns".into());
        }
        let mut mapped = HashSet::new();
        for class in self.labels.values() {
            if self.scheme.index_of(class).is_none() {
                return err(format!("label maps to unknown class `{class}`"));
            }
            if !mapped.insert(class) {
                return err(format!("class `{class}` has more than one raw label"));
            }
        }
        if mapped.len() != self.scheme.len() {
            return err("every class needs exactly one raw label".into());
        }
        Ok(())
    }

    pub fn class_index(&self, raw: &str) -> Option<usize> {
        self.labels.get(raw).and_then(|class| self.scheme.index_of(class))
    }

    /// Inverse of [`DatasetProfile::class_index`].
    pub fn raw_label(&self, class_index: usize) -> Option<&str> {
        let class = self.scheme.classes().get(class_index)?;
        self.labels
            .iter()
            .find(|(_, c)| *c == class)
            .map(|(raw, _)| raw.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRegistry {
    pub registry_version: u32,
    pub profiles: Vec<DatasetProfile>,
}

impl ProfileRegistry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_REGISTRY).expect("built-in registry is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let registry: Self =
            serde_json::from_str(json).map_err(|e| CorpusError::Registry(e.to_string()))?;
        if registry.registry_version != REGISTRY_VERSION {
            return Err(CorpusError::Registry(format!(
                "unsupported registry version {}",
                registry.registry_version
            )));
        }
        for profile in &registry.profiles {
            profile.validate()?;
        }
        Ok(registry)
    }

    pub fn get(&self, name: &str) -> Result<&DatasetProfile, CorpusError> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| CorpusError::UnknownProfile(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default)]
    pub lowercase: bool,
}

/// NFC-normalizes and trims; optionally lowercases.
pub fn preprocess(text: &str, options: &LoadOptions) -> String {
    let normalized: String = text.nfc().collect();
    let trimmed = normalized.trim();
    if options.lowercase {
        trimmed.to_lowercase()
    } else {
        trimmed.to_string()
    }
}

/// Loads a file using a profile from the built-in registry.
pub fn load_dataset(path: &Path, profile: &str) -> Result<Dataset, CorpusError> {
    let registry = ProfileRegistry::builtin();
    load_dataset_with(path, registry.get(profile)?, &LoadOptions::default())
}

pub fn load_dataset_with(
    path: &Path,
    profile: &DatasetProfile,
    options: &LoadOptions,
) -> Result<Dataset, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw_line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !profile.column_counts.contains(&fields.len()) {
            return Err(CorpusError::MalformedRow {
                path: path.to_path_buf(),
                line: line_no,
                expected: format!("{:?}", profile.column_counts),
                found: fields.len(),
            });
        }
        let raw_label = fields[profile.columns.label].trim();
        if instances.is_empty() && profile.header_label.as_deref() == Some(raw_label) {
            continue;
        }
        let id = fields[profile.columns.id].trim().to_string();
        let label = profile
            .class_index(raw_label)
            .ok_or_else(|| CorpusError::UnknownLabel {
                path: path.to_path_buf(),
                line: line_no,
                id: id.clone(),
                label: raw_label.to_string(),
            })?;
        let text = preprocess(fields[profile.columns.text], options);
        if text.is_empty() {
            return Err(CorpusError::EmptyText {
                path: path.to_path_buf(),
                line: line_no,
                id,
            });
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        instances.push(LabeledInstance { id, text, label });
    }
    let name = path
        .file_stem()
        .map(|s| format!("{}:{}", profile.name, s.to_string_lossy()))
        .unwrap_or_else(|| profile.name.clone());
    Dataset::new(
        name,
        profile.language.clone(),
        profile.source,
        profile.scheme.clone(),
        instances,
    )
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Number of training instances for a split: `floor(ratio * n)`, with a
/// tiny tolerance so that e.g. `0.29 * 100` yields 29.
pub fn train_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Shuffles with a seeded permutation and cuts at `floor(ratio * n)`.
/// Not stratified.
pub fn split_dataset(d: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    if d.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let order = permutation(d.len(), seed);
    let cut = train_size(d.len(), ratio);
    let pick = |idx: &[usize]| idx.iter().map(|&i| d.instances[i].clone()).collect::<Vec<_>>();
    Ok((d.derive("train", pick(&order[..cut])), d.derive("validation", pick(&order[cut..]))))
}

/// Most frequent label; ties go to the lower class index.
pub fn majority_label(d: &Dataset) -> Option<usize> {
    if d.is_empty() {
        return None;
    }
    let counts = d.label_counts();
    let best = counts.iter().copied().max()?;
    counts.iter().position(|&c| c == best)
}

/// Predicts the most frequent training label for every evaluation instance.
pub fn majority_baseline(train: &Dataset, eval: &Dataset) -> Result<EvaluationReport, CorpusError> {
    if train.scheme != eval.scheme {
        return Err(CorpusError::SchemeMismatch {
            left: train.scheme.to_string(),
            right: eval.scheme.to_string(),
        });
    }
    let majority = majority_label(train).ok_or(CorpusError::EmptyDataset)?;
    let gold = eval.labels();
    let pred = vec![majority; gold.len()];
    let label = format!("Baseline ({})", train.scheme.classes()[majority]);
    Ok(EvaluationReport::evaluate(label, &gold, &pred, &eval.scheme)?)
}
