//! Command implementations and the run directory they write into.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use offense_core::classifier::{self, predict_proba, ClassifierModel, TrainHistory};
use offense_core::corpus::{self, Dataset, LoadOptions, ProfileRegistry};
use offense_core::encoder::init_mini_encoder;
use offense_core::evaluation::{
    emit_comparison, emit_heatmap, reference_rows, EvaluationReport, HeatmapOptions, Language,
};
use offense_core::synthetic::SyntheticLanguage;
use offense_core::transfer::{self, Checkpoint, SourceInfo, Strategy};
use serde_json::{json, Map, Value};

use crate::config::{DataRef, ExperimentConfig};
use crate::error::CliError;

pub const OUTPUT_ROOT_VAR: &str = "OFFENSE_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Files are staged in a hidden sibling directory and moved into place as a
/// whole when the command finishes. A failed command leaves nothing behind.
pub struct RunDir {
    staging: tempfile::TempDir,
    target: PathBuf,
}

impl RunDir {
    pub fn create(target: PathBuf) -> Result<Self, CliError> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        let staging = tempfile::Builder::new()
            .prefix(".offense-staging-")
            .tempdir_in(&parent)
            .map_err(|e| CliError::Runtime(format!("cannot stage in {}: {e}", parent.display())))?;
        Ok(Self { staging, target })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.path().join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.file(name);
        fs::write(&path, content).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Replaces any previous run at the target path.
    pub fn commit(self) -> Result<PathBuf, CliError> {
        let err = |e: io::Error| CliError::Runtime(format!("cannot publish {}: {e}", self.target.display()));
        let staged = self.staging.keep();
        if self.target.exists() {
            let old = staged.with_extension("old");
            fs::rename(&self.target, &old).map_err(err)?;
            fs::rename(&staged, &self.target).map_err(err)?;
            fs::remove_dir_all(&old).map_err(err)?;
        } else {
            fs::rename(&staged, &self.target).map_err(err)?;
        }
        Ok(self.target)
    }
}

/// `--output`, then `output_dir`, then `$OFFENSE_OUTPUT_ROOT/<name>-<command>`.
pub fn run_path(config: &ExperimentConfig, command: &str, output: Option<&Path>) -> PathBuf {
    if let Some(p) = output {
        return p.to_path_buf();
    }
    if let Some(p) = &config.output_dir {
        return p.clone();
    }
    output_root().join(format!("{}-{command}", config.name))
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn load(config: &ExperimentConfig, data: &DataRef) -> Result<Dataset, CliError> {
    let registry = ProfileRegistry::builtin();
    let options = LoadOptions {
        lowercase: config.data.lowercase,
    };
    Ok(corpus::load_dataset_with(&data.path, registry.get(&data.profile)?, &options)?)
}

fn fresh_model(config: &ExperimentConfig, data: &Dataset) -> Result<ClassifierModel, CliError> {
    let encoder = init_mini_encoder(config.mini_encoder(), config.seed)
        .map_err(|e| CliError::Config(format!("encoder: {e}")))?;
    Ok(ClassifierModel::with_fresh_head(
        encoder,
        data.scheme().clone(),
        config.head.init,
        config.head.bias,
        config.seed,
    )?)
}

fn write_report(run: &RunDir, report: &EvaluationReport) -> Result<(), CliError> {
    run.write("report.json", &report.to_json_pretty())?;
    emit_heatmap(&report.confusion, &run.file("confusion"), HeatmapOptions::default())?;
    Ok(())
}

fn finish_training(
    run: RunDir,
    config: &ExperimentConfig,
    model: &ClassifierModel,
    history: &TrainHistory,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<PathBuf, CliError> {
    run.write("history.jsonl", &history.to_jsonl())?;
    let ckpt = transfer::export_checkpoint(
        model,
        true,
        SourceInfo {
            dataset: data.name().to_string(),
            train_config: Some(config.train.clone()),
            seed: config.seed,
        },
    )?;
    ckpt.save(&run.file("model.ckpt"))?;
    if let Some(eval) = eval {
        write_report(&run, &classifier::evaluate(model, eval, &config.name)?)?;
    }
    run.commit()
}

/// Writes an untrained model: fresh encoder and a head initialized per the
/// config (`head.init = "zeros"` gives uniform predictions).
pub fn init(config: &ExperimentConfig, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let data_ref = config.train_data()?;
    let scheme = ProfileRegistry::builtin().get(&data_ref.profile)?.scheme.clone();
    let encoder = init_mini_encoder(config.mini_encoder(), config.seed)
        .map_err(|e| CliError::Config(format!("encoder: {e}")))?;
    let model = ClassifierModel::with_fresh_head(encoder, scheme, config.head.init, config.head.bias, config.seed)?;
    let run = RunDir::create(run_path(config, "init", output))?;
    run.write("config.json", &config.to_json_pretty())?;
    let ckpt = transfer::export_checkpoint(
        &model,
        true,
        SourceInfo {
            dataset: String::new(),
            train_config: None,
            seed: config.seed,
        },
    )?;
    ckpt.save(&run.file("model.ckpt"))?;
    run.commit()
}

pub fn train(config: &ExperimentConfig, output: Option<&Path>) -> Result<PathBuf, CliError> {
    if config.transfer.is_some() {
        log::warn!("`train` ignores the transfer block; use `transfer` to start from a checkpoint");
    }
    let data = load(config, config.train_data()?)?;
    let eval = config.data.eval.as_ref().map(|d| load(config, d)).transpose()?;
    let model = fresh_model(config, &data)?;
    let run = RunDir::create(run_path(config, "train", output))?;
    run.write("config.json", &config.to_json_pretty())?;
    let (model, history) = classifier::train(&model, &data, &config.train)?;
    finish_training(run, config, &model, &history, &data, eval.as_ref())
}

/// Builds the starting model for the target task. All compatibility checks
/// happen here, before any training.
fn transferred_model(config: &ExperimentConfig, data: &Dataset) -> Result<ClassifierModel, CliError> {
    let t = config
        .transfer
        .as_ref()
        .ok_or_else(|| CliError::Config("`transfer` needs a transfer block".into()))?;
    match t.strategy {
        Strategy::Full => {
            let ckpt = Checkpoint::load(&t.source_checkpoint)?;
            let source = transfer::import_full(&ckpt)?;
            Ok(transfer::remap_head(source, data.scheme(), t.label_mapping.as_ref())?)
        }
        Strategy::EncoderOnly => {
            let ckpt = Checkpoint::load_encoder_only(&t.source_checkpoint)?;
            Ok(transfer::import_encoder_only(&ckpt, data.scheme(), config.seed)?)
        }
    }
}

pub fn transfer(config: &ExperimentConfig, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let data = load(config, config.train_data()?)?;
    let eval = config.data.eval.as_ref().map(|d| load(config, d)).transpose()?;
    let model = transferred_model(config, &data)?;
    let run = RunDir::create(run_path(config, "transfer", output))?;
    run.write("config.json", &config.to_json_pretty())?;
    let (model, history) = classifier::train(&model, &data, &config.train)?;
    finish_training(run, config, &model, &history, &data, eval.as_ref())
}

fn model_language(data: &Dataset) -> Option<Language> {
    Language::parse(data.language())
}

pub fn evaluate(config: &ExperimentConfig, checkpoint: &Path, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let data = load(config, config.eval_data()?)?;
    let model = transfer::import_full(&Checkpoint::load(checkpoint)?)?;
    let report = classifier::evaluate(&model, &data, &config.name)?;
    let run = RunDir::create(run_path(config, "evaluate", output))?;
    run.write("config.json", &config.to_json_pretty())?;
    write_report(&run, &report)?;
    if let Some(language) = model_language(&data) {
        emit_comparison(language, &[report], &reference_rows(language), &run.file("table"))?;
    }
    run.commit()
}

pub fn baseline(config: &ExperimentConfig, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let train = load(config, config.train_data()?)?;
    let eval = load(config, config.eval_data()?)?;
    let report = corpus::majority_baseline(&train, &eval)?;
    let run = RunDir::create(run_path(config, "baseline", output))?;
    run.write("config.json", &config.to_json_pretty())?;
    write_report(&run, &report)?;
    run.commit()
}

/// One JSON object per input line: predicted class and the distribution
/// over classes in scheme order.
pub fn predict(
    checkpoint: &Path,
    input: Option<&Path>,
    lowercase: bool,
    out: &mut dyn Write,
) -> Result<usize, CliError> {
    let model = transfer::import_full(&Checkpoint::load(checkpoint)?)?;
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(
            fs::File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let options = LoadOptions { lowercase };
    let classes = model.scheme().classes();
    let mut count = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| CliError::Data(format!("reading input: {e}")))?;
        let text = corpus::preprocess(&line, &options);
        let proba = predict_proba(&model, &text)?;
        let best = classifier::argmax(&proba);
        let probabilities: Map<String, Value> = classes
            .iter()
            .zip(&proba)
            .map(|(c, p)| (c.clone(), json!(p)))
            .collect();
        let record = json!({ "label": classes[best], "probabilities": probabilities });
        writeln!(out, "{record}")?;
        count += 1;
    }
    Ok(count)
}

/// Comparison table over finished runs, each contributing its `report.json`.
pub fn report(
    runs: &[PathBuf],
    language: Language,
    with_references: bool,
    output: &Path,
) -> Result<String, CliError> {
    let mut reports = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let report: EvaluationReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let references = if with_references {
        reference_rows(language)
    } else {
        Vec::new()
    };
    let run = RunDir::create(output.to_path_buf())?;
    let table = emit_comparison(language, &reports, &references, &run.file("table"))?;
    run.commit()?;
    Ok(table.to_text())
}

/// Writes a synthetic corpus in a profile's file layout.
pub fn generate(profile: &str, language: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let registry = ProfileRegistry::builtin();
    let profile = registry.get(profile).map_err(|e| CliError::Config(e.to_string()))?;
    let lang = SyntheticLanguage::new(language);
    let tag = format!("{language}{seed}");
    let data = match profile.scheme.len() {
        2 => lang.binary(profile.scheme.clone(), n, seed, &tag),
        3 => lang.aggression(n, seed, &tag),
        k => return Err(CliError::Config(format!("no synthetic generator for {k} classes"))),
    };
    let mut body = String::new();
    for inst in data.instances() {
        let raw = profile.raw_label(inst.label).expect("label in scheme");
        let mut fields = vec![""; profile.column_counts[0]];
        fields[profile.columns.id] = &inst.id;
        fields[profile.columns.text] = &inst.text;
        fields[profile.columns.label] = raw;
        body.push_str(&fields.join("\t"));
        body.push('\n');
    }
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", out.display()));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(out, body).map_err(io)
}
