use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{sample_few_shot, Label, Sample, TabularDataset, TaskType};
use crate::embed::{EmbeddingSpec, KnowledgeVector, LlmCalls};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, Targets};
use crate::model::{HeadKind, LatteModel, ModelConfig, ModelSpec, Prediction, RowTokens};
use crate::pretrain::{run_pretraining, PretrainConfig};
use crate::rng::derive_seed;

use super::baseline::baseline;
use super::metrics::{auc_multiclass, mse};
use super::report::{ExperimentReport, Metric, MetricResult};

/// Ablation switches. Turning a component off means: `sate` uses
/// name-blind feature tokens; `llm` sets the gate to the CLS path and drops
/// the distillation loss; `meta` skips unlabeled pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub sate: bool,
    pub llm: bool,
    pub meta: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        sate: true,
        llm: true,
        meta: true,
    };
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if *self == Variant::FULL {
            return f.write_str("full");
        }
        let parts: Vec<&str> = [(self.sate, "sate"), (self.llm, "llm"), (self.meta, "meta")]
            .iter()
            .filter(|(on, _)| !on)
            .map(|(_, name)| *name)
            .collect();
        write!(f, "no-{}", parts.join("-"))
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `full`, or `no-` followed by `-`/`+`-separated components to
    /// switch off, e.g. `no-meta`, `no-llm-meta`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(Variant::FULL);
        }
        let rest = s
            .strip_prefix("no-")
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`; expected `full` or `no-<parts>`")))?;
        let mut v = Variant::FULL;
        for part in rest.split(['-', '+']) {
            match part {
                "sate" => v.sate = false,
                "llm" => v.llm = false,
                "meta" => v.meta = false,
                other => return Err(Error::Config(format!("unknown component `{other}` in variant `{s}`"))),
            }
        }
        Ok(v)
    }
}

impl Serialize for VariantName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for VariantName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(VariantName).map_err(serde::de::Error::custom)
    }
}

/// A [`Variant`] written by name in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantName(pub Variant);

/// Name used for the linear baseline rows.
pub fn baseline_name(task_type: TaskType) -> &'static str {
    match task_type {
        TaskType::Classification => "logreg",
        TaskType::Regression => "linear",
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    pub dataset: TabularDataset,
    pub knowledge: KnowledgeVector,
    pub embedding: EmbeddingSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub variants: Vec<Variant>,
    pub baseline: bool,
    pub reference: BTreeMap<usize, String>,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
    /// When set, every trained model is checkpointed below this directory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Recorded in checkpoint manifests.
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.shots.is_empty() {
            return Err(Error::Config("seeds and shots must be non-empty".into()));
        }
        if self.variants.is_empty() && !self.baseline {
            return Err(Error::Config("nothing to run: no variants and no baseline".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.dataset.test.is_empty() {
            return Err(Error::Data("the test split is empty".into()));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    pub fn metric(&self) -> Metric {
        match self.dataset.metadata.task_type {
            TaskType::Classification => Metric::Auc,
            TaskType::Regression => Metric::Mse,
        }
    }

    /// Model configuration and training settings with the variant applied.
    pub fn settings(&self, variant: Variant) -> (ModelConfig, PretrainConfig, FinetuneConfig) {
        let mut model = self.model.clone();
        let mut pretrain = self.pretrain.clone();
        let mut finetune = self.finetune.clone();
        model.sate = variant.sate;
        if !variant.llm {
            model.adapter.eta = 0.0;
            pretrain.kl_weight = 0.0;
            finetune.kl_weight = 0.0;
        }
        (model, pretrain, finetune)
    }

    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        ModelSpec {
            config: self.settings(variant).0,
            metadata: self.dataset.metadata.clone(),
            norm_stats: self.dataset.norm_stats.clone(),
            embedding: self.embedding.clone(),
            knowledge: self.knowledge.clone(),
            task_head: None,
            pseudo_classes: None,
        }
    }
}

/// Tokenized rows of every split for one tokenization mode.
pub struct TokenizedSplits {
    pub labeled: Vec<RowTokens>,
    pub unlabeled: Vec<RowTokens>,
    pub test: Vec<RowTokens>,
}

/// Test-set metric of a trained model: AUC, or MSE in normalized target space.
pub fn score_predictions(dataset: &TabularDataset, predictions: &[Prediction], test: &[Sample]) -> Result<f64> {
    match dataset.metadata.task_type {
        TaskType::Classification => {
            let mut probs = Vec::with_capacity(predictions.len());
            let mut labels = Vec::with_capacity(predictions.len());
            for (p, s) in predictions.iter().zip(test) {
                let (Prediction::Probabilities(p), Some(Label::Class(c))) = (p, &s.label) else {
                    return Err(Error::Contract("test row or prediction is not a classification".into()));
                };
                probs.push(p.clone());
                labels.push(*c);
            }
            auc_multiclass(&probs, &labels)
        }
        TaskType::Regression => {
            let stats = &dataset.norm_stats;
            let mut preds = Vec::with_capacity(predictions.len());
            let mut targets = Vec::with_capacity(predictions.len());
            for (p, s) in predictions.iter().zip(test) {
                let (Prediction::Value(v), Some(Label::Value(y))) = (p, &s.label) else {
                    return Err(Error::Contract("test row or prediction is not a regression".into()));
                };
                preds.push(stats.normalize_target(*v));
                targets.push(stats.normalize_target(*y));
            }
            mse(&preds, &targets)
        }
    }
}

/// A model after the optional pretraining stage, shared by all shots.
pub struct Backbone {
    pub model: LatteModel,
}

pub fn pretrained_backbone(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    tokens: &TokenizedSplits,
) -> Result<Backbone> {
    let (_, pretrain, _) = config.settings(variant);
    let model = LatteModel::new(config.model_spec(variant), derive_seed(seed, "model-init", 0))?;
    if !variant.meta {
        return Ok(Backbone { model });
    }
    let outcome = run_pretraining(model, &tokens.unlabeled, &pretrain, derive_seed(seed, "pretrain", 0))?;
    Ok(Backbone { model: outcome.model })
}

/// Fine-tunes a copy of `backbone` on the `shot` split of `seed`.
pub fn finetune_cell(
    config: &ExperimentConfig,
    variant: Variant,
    backbone: &Backbone,
    tokens: &TokenizedSplits,
    shot: usize,
    seed: u64,
) -> Result<LatteModel> {
    let (_, _, ft) = config.settings(variant);
    let split = sample_few_shot(&config.dataset, shot, seed)?;
    let rows: Vec<RowTokens> = split.labeled_indices.iter().map(|&i| tokens.labeled[i].clone()).collect();
    let kind = HeadKind::for_metadata(&config.dataset.metadata);
    let targets = Targets::from_samples(split.samples(&config.dataset), kind, &config.dataset.norm_stats)?;
    let outcome = finetune(
        backbone.model.clone(),
        &rows,
        &targets,
        &ft,
        derive_seed(seed, "finetune", shot as u64),
    )?;
    Ok(outcome.model)
}

/// Where a stage checkpoint of one (variant, seed) group lives, when the
/// configuration names a checkpoint directory.
pub fn checkpoint_path(config: &ExperimentConfig, variant: Variant, seed: u64, stage: &str) -> Option<PathBuf> {
    config
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(variant.to_string()).join(format!("seed{seed}")).join(format!("{stage}.ckpt")))
}

/// Writes a stage checkpoint; fine-tuned checkpoints also record their
/// few-shot split. A no-op without a checkpoint directory.
pub fn save_checkpoint(config: &ExperimentConfig, model: &LatteModel, variant: Variant, seed: u64, stage: &str, shot: Option<usize>) -> Result<()> {
    let Some(path) = checkpoint_path(config, variant, seed, stage) else {
        return Ok(());
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let split = shot.map(|k| sample_few_shot(&config.dataset, k, seed)).transpose()?;
    let extra = serde_json::json!({
        "dataset": config.dataset_name,
        "variant": variant.to_string(),
        "shot": shot,
        "split": split,
    });
    model.to_checkpoint(stage, &config.config_hash, seed, extra)?.save(&path)
}

fn run_group(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    tokens: &TokenizedSplits,
    metric: Metric,
) -> Vec<MetricResult> {
    let cell = |shot: usize, outcome: Result<f64>| {
        let (value, error) = match outcome {
            Ok(v) => (Some(v), None),
            Err(e) => {
                log::warn!("{variant} seed {seed} shot {shot}: {e}");
                (None, Some(e.to_string()))
            }
        };
        MetricResult {
            dataset: config.dataset_name.clone(),
            variant: variant.to_string(),
            shot,
            seed,
            metric,
            value,
            error,
        }
    };
    let backbone = pretrained_backbone(config, variant, seed, tokens)
        .and_then(|b| save_checkpoint(config, &b.model, variant, seed, "pretrain", None).map(|_| b));
    let backbone = match backbone {
        Ok(b) => b,
        Err(e) => {
            let msg = e.to_string();
            log::warn!("{variant} seed {seed}: pretraining failed: {msg}");
            return config
                .shots
                .iter()
                .map(|&shot| cell(shot, Err(Error::Numerical(format!("pretraining failed: {msg}")))))
                .collect();
        }
    };
    config
        .shots
        .iter()
        .map(|&shot| {
            let outcome = finetune_cell(config, variant, &backbone, tokens, shot, seed).and_then(|model| {
                save_checkpoint(config, &model, variant, seed, &format!("finetune-shot{shot}"), Some(shot))?;
                let predictions = model.predict_tokens(&tokens.test)?;
                score_predictions(&config.dataset, &predictions, &config.dataset.test)
            });
            log::info!("{variant} seed {seed} shot {shot}: {outcome:?}");
            cell(shot, outcome)
        })
        .collect()
}

fn baseline_rows(config: &ExperimentConfig, metric: Metric) -> Vec<MetricResult> {
    let d = &config.dataset;
    let mut out = Vec::new();
    for &seed in &config.seeds {
        for &shot in &config.shots {
            let outcome = sample_few_shot(d, shot, seed)
                .and_then(|split| baseline(&d.metadata, &d.norm_stats, &split.samples(d), &d.test));
            let (value, error) = match outcome {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(MetricResult {
                dataset: config.dataset_name.clone(),
                variant: baseline_name(d.metadata.task_type).into(),
                shot,
                seed,
                metric,
                value,
                error,
            });
        }
    }
    out
}

pub fn tokenize_splits(config: &ExperimentConfig, sate: bool) -> Result<TokenizedSplits> {
    let provider = config.embedding.provider()?;
    let model = LatteModel::new(config.model_spec(Variant { sate, ..Variant::FULL }), 0)?;
    Ok(TokenizedSplits {
        labeled: model.tokenize(provider.as_ref(), &config.dataset.labeled)?,
        unlabeled: model.tokenize(provider.as_ref(), &config.dataset.unlabeled)?,
        test: model.tokenize(provider.as_ref(), &config.dataset.test)?,
    })
}

/// Runs every (variant, seed, shot) cell. Pretraining is shared by the shots
/// of a (variant, seed) group; groups run on worker threads and results are
/// assembled in configuration order. `llm_calls` is the caller's count of
/// language-model calls made while preparing the knowledge vector.
pub fn run_experiment(config: &ExperimentConfig, llm_calls: LlmCalls) -> Result<ExperimentReport> {
    config.validate()?;
    let metric = config.metric();
    let mut token_sets: BTreeMap<bool, TokenizedSplits> = BTreeMap::new();
    for v in &config.variants {
        if !token_sets.contains_key(&v.sate) {
            token_sets.insert(v.sate, tokenize_splits(config, v.sate)?);
        }
    }
    let groups: Vec<(Variant, u64)> = config
        .variants
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let slots: Vec<Mutex<Option<Vec<MetricResult>>>> = groups.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = match config.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(groups.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = groups.get(i) else { break };
                let rows = run_group(config, variant, seed, &token_sets[&variant.sate], metric);
                *slots[i].lock().expect("result slot") = Some(rows);
            });
        }
    });
    let mut results = Vec::new();
    for slot in slots {
        results.extend(slot.into_inner().expect("result slot").unwrap_or_default());
    }
    if config.baseline {
        results.extend(baseline_rows(config, metric));
    }
    Ok(ExperimentReport {
        results,
        llm_calls,
        reference: config.reference.clone(),
    })
}
