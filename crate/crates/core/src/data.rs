//! Tabular datasets with metadata: loading, normalization statistics and
//! few-shot sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Token substituted for an empty categorical cell.
pub const MISSING_TOKEN: &str = "missing";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Regression,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskType::Classification => f.write_str("classification"),
            TaskType::Regression => f.write_str("regression"),
        }
    }
}

/// One column: its name, a free-text description and its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub kind: FeatureKind,
}

/// Task description plus feature definitions. This is the only input to
/// knowledge extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub task_description: String,
    pub task_type: TaskType,
    pub features: Vec<FeatureDescriptor>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl Metadata {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("metadata declares no features".into()));
        }
        let mut seen = HashSet::new();
        for feature in &self.features {
            if feature.name.is_empty() {
                return Err(Error::Schema("feature with empty name".into()));
            }
            if !seen.insert(feature.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name `{}`",
                    feature.name
                )));
            }
        }
        match self.task_type {
            TaskType::Classification if self.class_names.len() < 2 => Err(Error::Schema(format!(
                "classification requires at least 2 class names, got {}",
                self.class_names.len()
            ))),
            TaskType::Regression if !self.class_names.is_empty() => Err(Error::Schema(
                "regression metadata must not declare class names".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Counts of (categorical, numerical) features.
    pub fn kind_counts(&self) -> (usize, usize) {
        let cat = self
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::Categorical)
            .count();
        (cat, self.features.len() - cat)
    }
}

/// On-disk metadata document: [`Metadata`] plus the label column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataFile {
    pub task_description: String,
    pub task_type: TaskType,
    pub label_column: String,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub features: Vec<FeatureDescriptor>,
}

impl MetadataFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: MetadataFile = toml::from_str(text)?;
        file.metadata().validate()?;
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metadata serializes to toml")
    }

    pub fn metadata(&self) -> Metadata {
        Metadata {
            task_description: self.task_description.clone(),
            task_type: self.task_type,
            features: self.features.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Text(String),
    Number(f64),
    Missing,
}

impl RawValue {
    /// Text of a categorical value; missing cells render as [`MISSING_TOKEN`].
    pub fn as_text(&self) -> String {
        match self {
            RawValue::Text(s) => s.clone(),
            RawValue::Number(x) => x.to_string(),
            RawValue::Missing => MISSING_TOKEN.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

/// One row. `values` is aligned with the metadata feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub values: Vec<RawValue>,
    pub label: Option<Label>,
}

impl Sample {
    pub fn value<'a>(&'a self, metadata: &Metadata, name: &str) -> Option<&'a RawValue> {
        metadata.feature_index(name).map(|i| &self.values[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    /// Population standard deviation; 0 for a constant feature.
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRange {
    pub min: f64,
    pub max: f64,
}

impl TargetRange {
    fn span(&self) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            span
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub numerical: BTreeMap<String, FeatureStats>,
    pub target: Option<TargetRange>,
}

impl NormStats {
    /// Z-scores a numerical value. A recorded std of 0 is applied as 1.
    /// Missing numerical values map to the mean, i.e. 0.
    pub fn normalize(&self, feature: &str, value: &RawValue) -> Result<f64> {
        let stats = self.numerical.get(feature).ok_or_else(|| {
            Error::Contract(format!("no normalization statistics for `{feature}`"))
        })?;
        match value {
            RawValue::Number(x) => {
                let std = if stats.std > 0.0 { stats.std } else { 1.0 };
                Ok((x - stats.mean) / std)
            }
            RawValue::Missing => Ok(0.0),
            RawValue::Text(t) => Err(Error::Contract(format!(
                "numerical feature `{feature}` holds text value `{t}`"
            ))),
        }
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        match self.target {
            Some(range) => (y - range.min) / range.span(),
            None => y,
        }
    }

    pub fn denormalize_target(&self, y: f64) -> f64 {
        match self.target {
            Some(range) => y * range.span() + range.min,
            None => y,
        }
    }

    /// Replaces the target range with one computed from `rows` (labels only).
    pub fn with_target_range_from<'a>(mut self, rows: impl IntoIterator<Item = &'a Sample>) -> Self {
        self.target = target_range(rows);
        self
    }
}

fn target_range<'a>(rows: impl IntoIterator<Item = &'a Sample>) -> Option<TargetRange> {
    let mut range: Option<TargetRange> = None;
    for row in rows {
        if let Some(Label::Value(y)) = row.label {
            let r = range.get_or_insert(TargetRange { min: y, max: y });
            r.min = r.min.min(y);
            r.max = r.max.max(y);
        }
    }
    range
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub metadata: Metadata,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub norm_stats: NormStats,
}

impl TabularDataset {
    /// Assembles a dataset and computes its normalization statistics.
    pub fn new(
        metadata: Metadata,
        labeled: Vec<Sample>,
        unlabeled: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        metadata.validate()?;
        let mut dataset = TabularDataset {
            metadata,
            labeled,
            unlabeled,
            test,
            norm_stats: NormStats::default(),
        };
        if !dataset.labeled.is_empty() || !dataset.unlabeled.is_empty() {
            dataset.norm_stats = compute_norm_stats(&dataset)?;
        }
        Ok(dataset)
    }
}

/// Per numerical feature: population mean/std over labeled ∪ unlabeled.
/// Regression target range: labeled rows only.
pub fn compute_norm_stats(dataset: &TabularDataset) -> Result<NormStats> {
    let rows: Vec<&Sample> = dataset.labeled.iter().chain(&dataset.unlabeled).collect();
    if rows.is_empty() {
        return Err(Error::Contract(
            "normalization statistics need at least one row".into(),
        ));
    }
    let mut numerical = BTreeMap::new();
    for (j, feature) in dataset.metadata.features.iter().enumerate() {
        if feature.kind != FeatureKind::Numerical {
            continue;
        }
        let values: Vec<f64> = rows
            .iter()
            .filter_map(|r| match r.values[j] {
                RawValue::Number(x) => Some(x),
                _ => None,
            })
            .collect();
        let stats = if values.is_empty() {
            FeatureStats { mean: 0.0, std: 0.0 }
        } else {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            FeatureStats {
                mean,
                std: var.sqrt(),
            }
        };
        numerical.insert(feature.name.clone(), stats);
    }
    let target = match dataset.metadata.task_type {
        TaskType::Regression => target_range(&dataset.labeled),
        TaskType::Classification => None,
    };
    Ok(NormStats { numerical, target })
}

#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { delimiter: b',' }
    }
}

/// Loads a delimiter-separated data file against a metadata file. Rows with
/// an empty label cell land in `unlabeled`; the test split is left empty.
pub fn load_dataset(data_path: &Path, metadata_path: &Path) -> Result<TabularDataset> {
    load_dataset_with(data_path, metadata_path, CsvOptions::default())
}

pub fn load_dataset_with(
    data_path: &Path,
    metadata_path: &Path,
    options: CsvOptions,
) -> Result<TabularDataset> {
    let meta_file = MetadataFile::read(metadata_path)?;
    let rows = read_rows(data_path, &meta_file, options)?;
    let (labeled, unlabeled) = rows.into_iter().partition(|s| s.label.is_some());
    TabularDataset::new(meta_file.metadata(), labeled, unlabeled, Vec::new())
}

/// Reads rows of a data file; rows keep their (possibly absent) labels.
pub fn read_rows(path: &Path, meta: &MetadataFile, options: CsvOptions) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rows(file, meta, options)
}

pub fn parse_rows<R: std::io::Read>(
    reader: R,
    meta: &MetadataFile,
    options: CsvOptions,
) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers = reader.headers()?.clone();
    let column_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in data header")))
    };
    let feature_columns = meta
        .features
        .iter()
        .map(|f| column_of(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_column = column_of(&meta.label_column)?;

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |col: usize| record.get(col).map(str::trim).unwrap_or("");
        let mut values = Vec::with_capacity(meta.features.len());
        for (feature, &col) in meta.features.iter().zip(&feature_columns) {
            let raw = cell(col);
            let value = match (feature.kind, raw.is_empty()) {
                (_, true) => RawValue::Missing,
                (FeatureKind::Categorical, false) => RawValue::Text(raw.to_string()),
                (FeatureKind::Numerical, false) => {
                    let x: f64 = raw.parse().map_err(|_| Error::Parse {
                        row,
                        column: feature.name.clone(),
                        message: format!("`{raw}` is not a number"),
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Parse {
                            row,
                            column: feature.name.clone(),
                            message: format!("non-finite value `{raw}`"),
                        });
                    }
                    RawValue::Number(x)
                }
            };
            values.push(value);
        }
        let label = parse_label(cell(label_column), meta, row)?;
        samples.push(Sample { values, label });
    }
    Ok(samples)
}

fn parse_label(raw: &str, meta: &MetadataFile, row: usize) -> Result<Option<Label>> {
    if raw.is_empty() {
        return Ok(None);
    }
    let err = |message: String| Error::Parse {
        row,
        column: meta.label_column.clone(),
        message,
    };
    match meta.task_type {
        TaskType::Classification => {
            if let Some(i) = meta.class_names.iter().position(|c| c == raw) {
                return Ok(Some(Label::Class(i)));
            }
            match raw.parse::<usize>() {
                Ok(i) if i < meta.class_names.len() => Ok(Some(Label::Class(i))),
                _ => Err(err(format!("`{raw}` is not a declared class"))),
            }
        }
        TaskType::Regression => raw
            .parse::<f64>()
            .ok()
            .filter(|y| y.is_finite())
            .map(|y| Some(Label::Value(y)))
            .ok_or_else(|| err(format!("`{raw}` is not a number"))),
    }
}

/// Serializes rows back to delimiter-separated text with the metadata's
/// column layout (features then label).
pub fn write_rows(meta: &MetadataFile, rows: &[Sample]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = meta.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&meta.label_column);
    writer.write_record(&header)?;
    for row in rows {
        let mut record: Vec<String> = row
            .values
            .iter()
            .map(|v| match v {
                RawValue::Text(s) => s.clone(),
                RawValue::Number(x) => x.to_string(),
                RawValue::Missing => String::new(),
            })
            .collect();
        record.push(match row.label {
            None => String::new(),
            Some(Label::Class(i)) => meta.class_names[i].clone(),
            Some(Label::Value(y)) => y.to_string(),
        });
        writer.write_record(&record)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub shot: usize,
    pub seed: u64,
    /// Indices into `TabularDataset::labeled`.
    pub labeled_indices: Vec<usize>,
}

impl FewShotSplit {
    pub fn samples<'a>(&self, dataset: &'a TabularDataset) -> Vec<&'a Sample> {
        self.labeled_indices
            .iter()
            .map(|&i| &dataset.labeled[i])
            .collect()
    }
}

/// Draws a few-shot split: `shot` rows per class for classification,
/// `shot` rows in total for regression.
pub fn sample_few_shot(dataset: &TabularDataset, shot: usize, seed: u64) -> Result<FewShotSplit> {
    if shot == 0 {
        return Err(Error::Contract("shot must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "few-shot", shot as u64);
    let labeled_indices = match dataset.metadata.task_type {
        TaskType::Classification => {
            let classes = dataset.metadata.num_classes();
            let mut by_class = vec![Vec::new(); classes];
            for (i, sample) in dataset.labeled.iter().enumerate() {
                if let Some(Label::Class(c)) = sample.label {
                    by_class[c].push(i);
                }
            }
            let mut picked = Vec::new();
            for (c, mut members) in by_class.into_iter().enumerate() {
                if members.is_empty() {
                    return Err(Error::Contract(format!(
                        "class `{}` has no labeled samples",
                        dataset.metadata.class_names[c]
                    )));
                }
                if members.len() < shot {
                    log::warn!(
                        "class `{}` has {} labeled samples, fewer than shot={shot}; taking all",
                        dataset.metadata.class_names[c],
                        members.len()
                    );
                }
                members.shuffle(&mut rng);
                members.truncate(shot);
                picked.extend(members);
            }
            picked
        }
        TaskType::Regression => {
            let n = dataset.labeled.len();
            if n == 0 {
                return Err(Error::Contract("no labeled samples to draw from".into()));
            }
            if n < shot {
                log::warn!("only {n} labeled samples available for shot={shot}; taking all");
            }
            index::sample(&mut rng, n, shot.min(n)).into_vec()
        }
    };
    Ok(FewShotSplit {
        shot,
        seed,
        labeled_indices,
    })
}
