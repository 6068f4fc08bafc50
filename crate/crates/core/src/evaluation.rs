//! Classification metrics and report emission.
//!
//! Per-class precision, recall and F1 come from a [`ConfusionMatrix`]
//! (rows are gold classes, columns predicted classes). Any ratio whose
//! denominator is zero is defined as 0, so a class with no gold and no
//! predicted instances contributes F1 = 0 to the macro average.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelScheme;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {label} at position {position} is invalid for a {k}-class scheme")]
    InvalidLabel { position: usize, label: usize, k: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    scheme: LabelScheme,
    /// `counts[gold][pred]`.
    counts: Vec<Vec<u64>>,
}

/// Counts `(gold, pred)` pairs into a `k × k` matrix.
pub fn confusion(
    gold: &[usize],
    pred: &[usize],
    scheme: &LabelScheme,
) -> Result<ConfusionMatrix, EvaluationError> {
    if gold.len() != pred.len() {
        return Err(EvaluationError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let k = scheme.len();
    let mut matrix = ConfusionMatrix::zeros(scheme.clone());
    for (position, (&g, &p)) in gold.iter().zip(pred).enumerate() {
        for label in [g, p] {
            if label >= k {
                return Err(EvaluationError::InvalidLabel { position, label, k });
            }
        }
        matrix.counts[g][p] += 1;
    }
    Ok(matrix)
}

impl ConfusionMatrix {
    pub fn zeros(scheme: LabelScheme) -> Self {
        let k = scheme.len();
        Self {
            scheme,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn gold_support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.counts[class][class] as f64;
        let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
        let precision = ratio(tp, self.predicted_count(class));
        let recall = ratio(tp, self.gold_support(class));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            class: self.scheme.classes()[class].clone(),
            precision,
            recall,
            f1,
            support: self.gold_support(class),
        }
    }

    /// Each row divided by its total; rows with no gold instances stay 0.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(m: &ConfusionMatrix) -> f64 {
    let k = m.k();
    (0..k).map(|c| m.class_scores(c).f1).sum::<f64>() / k as f64
}

/// Per-class F1 weighted by gold support. Defined as 0 for an empty matrix.
pub fn weighted_f1(m: &ConfusionMatrix) -> f64 {
    let total = m.total();
    if total == 0 {
        return 0.0;
    }
    (0..m.k())
        .map(|c| {
            let scores = m.class_scores(c);
            scores.support as f64 * scores.f1
        })
        .sum::<f64>()
        / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Model or run label shown in comparison tables.
    pub label: String,
    pub instances: u64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

impl EvaluationReport {
    pub fn from_confusion(label: impl Into<String>, confusion: ConfusionMatrix) -> Self {
        let instances = confusion.total();
        if instances == 0 {
            log::warn!("evaluating an empty prediction set; all scores are 0");
        }
        Self {
            label: label.into(),
            instances,
            per_class: (0..confusion.k()).map(|c| confusion.class_scores(c)).collect(),
            macro_f1: macro_f1(&confusion),
            weighted_f1: weighted_f1(&confusion),
            confusion,
        }
    }

    pub fn evaluate(
        label: impl Into<String>,
        gold: &[usize],
        pred: &[usize],
        scheme: &LabelScheme,
    ) -> Result<Self, EvaluationError> {
        Ok(Self::from_confusion(label, confusion(gold, pred, scheme)?))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeatmapOptions {
    /// Emit row-normalized rates instead of raw counts.
    pub normalize: bool,
}

#[derive(Debug)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    /// `None` when rendering failed; see `render_error`.
    pub image: Option<PathBuf>,
    pub render_error: Option<String>,
}

const CELL_PX: u32 = 48;

fn cell_color(intensity: f64) -> Rgb<u8> {
    // white -> dark blue
    let t = intensity.clamp(0.0, 1.0);
    let lerp = |from: f64, to: f64| (from + (to - from) * t).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

/// Renders the matrix as a raster image; one square cell per entry.
pub fn render_heatmap(m: &ConfusionMatrix, options: HeatmapOptions) -> RgbImage {
    let k = m.k() as u32;
    let values: Vec<Vec<f64>> = if options.normalize {
        m.row_normalized()
    } else {
        let max = m.rows().iter().flatten().copied().max().unwrap_or(0);
        m.rows()
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
                    .collect()
            })
            .collect()
    };
    let side = k * CELL_PX + 1;
    let mut img = RgbImage::from_pixel(side, side, Rgb([96, 96, 96]));
    for (g, row) in values.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let color = cell_color(v);
            let (x0, y0) = (p as u32 * CELL_PX + 1, g as u32 * CELL_PX + 1);
            for y in y0..y0 + CELL_PX - 1 {
                for x in x0..x0 + CELL_PX - 1 {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

/// Writes `<stem>.csv` (class-name headers) and then `<stem>.png`. The CSV
/// is written first and survives a rendering failure.
pub fn emit_heatmap(
    m: &ConfusionMatrix,
    stem: &Path,
    options: HeatmapOptions,
) -> Result<HeatmapFiles, EvaluationError> {
    let csv_path = stem.with_extension("csv");
    write_matrix_csv(m, &csv_path, options)?;
    let png_path = stem.with_extension("png");
    let (image, render_error) = match render_heatmap(m, options).save(&png_path) {
        Ok(()) => (Some(png_path), None),
        Err(e) => {
            log::warn!("heat-map rendering failed for {}: {e}", png_path.display());
            (None, Some(e.to_string()))
        }
    };
    Ok(HeatmapFiles {
        csv: csv_path,
        image,
        render_error,
    })
}

fn write_matrix_csv(
    m: &ConfusionMatrix,
    path: &Path,
    options: HeatmapOptions,
) -> Result<(), EvaluationError> {
    let csv_err = |source| EvaluationError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["gold \\ predicted".to_string()];
    header.extend(m.scheme().classes().iter().cloned());
    writer.write_record(&header).map_err(csv_err)?;
    let normalized = m.row_normalized();
    for (g, class) in m.scheme().classes().iter().enumerate() {
        let mut record = vec![class.clone()];
        if options.normalize {
            record.extend(normalized[g].iter().map(|v| v.to_string()));
        } else {
            record.extend(m.rows()[g].iter().map(|v| v.to_string()));
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| EvaluationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Language sections of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    English,
    Bengali,
    Hindi,
    Spanish,
}

impl Language {
    /// Bengali rows are ordered by macro F1; the others by weighted F1.
    pub fn sort_metric(self) -> SortMetric {
        match self {
            Language::Bengali => SortMetric::Macro,
            _ => SortMetric::Weighted,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "english" | "en" => Some(Self::English),
            "bengali" | "bn" => Some(Self::Bengali),
            "hindi" | "hi" => Some(Self::Hindi),
            "spanish" | "es" => Some(Self::Spanish),
            _ => None,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Language::English => "English",
            Language::Bengali => "Bengali",
            Language::Hindi => "Hindi",
            Language::Spanish => "Spanish",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortMetric {
    Macro,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
    /// Static published score rather than a computed run.
    pub reference: bool,
}

impl From<&EvaluationReport> for ComparisonRow {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            model: r.label.clone(),
            macro_f1: Some(r.macro_f1),
            weighted_f1: Some(r.weighted_f1),
            reference: false,
        }
    }
}

impl ComparisonRow {
    fn reference(model: &str, macro_f1: Option<f64>, weighted_f1: Option<f64>) -> Self {
        Self {
            model: model.to_string(),
            macro_f1,
            weighted_f1,
            reference: true,
        }
    }

    pub fn key(&self, metric: SortMetric) -> Option<f64> {
        match metric {
            SortMetric::Macro => self.macro_f1,
            SortMetric::Weighted => self.weighted_f1,
        }
    }
}

/// Best shared-task systems per language, as published.
pub fn reference_rows(language: Language) -> Vec<ComparisonRow> {
    match language {
        Language::Bengali => vec![ComparisonRow::reference("Risch and Krestel (2020)", Some(0.8219), None)],
        Language::Hindi => vec![ComparisonRow::reference(
            "Bashar and Nayak (2019)",
            Some(0.8149),
            Some(0.8202),
        )],
        Language::Spanish => vec![
            ComparisonRow::reference("Vega et al. (2019)", None, Some(0.7300)),
            ComparisonRow::reference("Pérez and Luque (2019)", None, Some(0.7300)),
        ],
        Language::English => Vec::new(),
    }
}

/// Row order: descending sort key, rows without the key last, then model
/// name ascending.
pub fn compare_rows(a: &ComparisonRow, b: &ComparisonRow, metric: SortMetric) -> Ordering {
    let by_key = match (a.key(metric), b.key(metric)) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by_key.then_with(|| a.model.cmp(&b.model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub language: Language,
    pub rows: Vec<ComparisonRow>,
}

pub fn comparison_table(
    language: Language,
    reports: &[EvaluationReport],
    references: &[ComparisonRow],
) -> ComparisonTable {
    let metric = language.sort_metric();
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(ComparisonRow::from)
        .chain(references.iter().cloned())
        .collect();
    rows.sort_by(|a, b| compare_rows(a, b, metric));
    ComparisonTable { language, rows }
}

fn score_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.chars().count() + if r.reference { 2 } else { 0 })
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let sorted_by = match self.language.sort_metric() {
            SortMetric::Macro => "macro F1",
            SortMetric::Weighted => "weighted F1",
        };
        let mut out = format!("{} (sorted by {sorted_by})\n", self.language);
        out.push_str(&format!("{:<width$}  {:>6}  {:>6}\n", "Model", "M F1", "W F1"));
        out.push_str(&format!("{}\n", "-".repeat(width + 16)));
        for row in &self.rows {
            let name = if row.reference {
                format!("{} *", row.model)
            } else {
                row.model.clone()
            };
            let pad = width.saturating_sub(name.chars().count());
            out.push_str(&format!(
                "{name}{}  {:>6}  {:>6}\n",
                " ".repeat(pad),
                score_cell(row.macro_f1),
                score_cell(row.weighted_f1)
            ));
        }
        if self.rows.iter().any(|r| r.reference) {
            out.push_str("* published reference score\n");
        }
        out
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["language", "model", "macro_f1", "weighted_f1", "reference"])?;
        for row in &self.rows {
            w.write_record([
                self.language.to_string(),
                row.model.clone(),
                score_cell(row.macro_f1),
                score_cell(row.weighted_f1),
                row.reference.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `<stem>.txt` (aligned) and `<stem>.csv` and returns the table.
pub fn emit_comparison(
    language: Language,
    reports: &[EvaluationReport],
    references: &[ComparisonRow],
    stem: &Path,
) -> Result<ComparisonTable, EvaluationError> {
    let table = comparison_table(language, reports, references);
    let txt = stem.with_extension("txt");
    fs::write(&txt, table.to_text()).map_err(|source| EvaluationError::Io { path: txt, source })?;
    let csv_path = stem.with_extension("csv");
    let file = fs::File::create(&csv_path).map_err(|source| EvaluationError::Io {
        path: csv_path.clone(),
        source,
    })?;
    table
        .write_csv(file)
        .map_err(|source| EvaluationError::Csv { path: csv_path, source })?;
    Ok(table)
}
