//! Supervised fine-tuning on the few labeled rows, `kl_weight·L_KL + L_true`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Label, NormStats, Sample, TaskType};
use crate::error::{Error, Result};
use crate::model::{label_target, HeadKind, LatteModel, Prediction, RowTokens};
use crate::nn::{Adam, ForwardCtx, Gradients, Graph, ParameterStore, Var};
use crate::rng;

/// Probabilities are clamped at this floor before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub kl_weight: f64,
    /// Early stop after this many epochs without a `min_delta` improvement
    /// of the training loss. 0 disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-5,
            epochs: 2000,
            kl_weight: 1.0,
            patience: 20,
            min_delta: 1e-5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// `-log p[y]` for classification, `(y - ŷ)²` for regression.
pub fn supervised_loss(prediction: &Prediction, label: &Label, task_type: TaskType) -> Result<f64> {
    match (prediction, label, task_type) {
        (Prediction::Probabilities(p), Label::Class(y), TaskType::Classification) => {
            let py = p
                .get(*y)
                .ok_or_else(|| Error::Contract(format!("class {y} outside {} probabilities", p.len())))?;
            Ok(-py.max(PROBABILITY_FLOOR).ln())
        }
        (Prediction::Value(yhat), Label::Value(y), TaskType::Regression) => Ok((y - yhat).powi(2)),
        _ => Err(Error::Contract("prediction, label and task type disagree".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Normalized targets.
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        kind: HeadKind,
        stats: &NormStats,
    ) -> Result<Self> {
        let values: Vec<f64> = samples
            .into_iter()
            .map(|s| {
                let label = s
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Contract("labeled row without a label".into()))?;
                label_target(label, kind, stats)
            })
            .collect::<Result<_>>()?;
        Ok(match kind {
            HeadKind::Classification { .. } => Targets::Classes(values.iter().map(|&v| v as usize).collect()),
            HeadKind::Regression => Targets::Values(values),
        })
    }
}

/// Builds the fine-tuning loss. Returns `(graph, loss, kl, true_loss)`.
pub fn finetune_loss_graph(
    model: &LatteModel,
    store: &ParameterStore,
    ctx: &mut ForwardCtx,
    rows: &[&RowTokens],
    targets: &Targets,
    kl_weight: f64,
) -> Result<(Graph, Var, Var, Var)> {
    if rows.len() != targets.len() {
        return Err(Error::Contract(format!("{} rows for {} targets", rows.len(), targets.len())));
    }
    let mut g = Graph::new();
    let nodes = model
        .net
        .forward(&mut g, store, ctx, rows, &model.spec.knowledge.vector, None)?;
    let out = model.net.task_logits(&mut g, store, nodes.representation())?;
    let true_loss = match targets {
        Targets::Classes(ys) => {
            let logp = g.log_softmax(out);
            let picked = g.pick(logp, ys.clone())?;
            let m = g.mean(picked);
            g.scale(m, -1.0)
        }
        Targets::Values(ys) => {
            let y = g.constant(Array2::from_shape_vec((ys.len(), 1), ys.clone()).expect("column"));
            let diff = g.sub(out, y)?;
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
    };
    let kl = g.mean(nodes.adapter.kl);
    let weighted = g.scale(kl, kl_weight);
    let loss = g.add(weighted, true_loss)?;
    Ok((g, loss, kl, true_loss))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: LatteModel,
    /// Pre-update training loss per epoch.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
}

fn loss_and_grads(
    model: &LatteModel,
    ctx: &mut ForwardCtx,
    rows: &[&RowTokens],
    targets: &Targets,
    kl_weight: f64,
) -> Result<(f64, Gradients)> {
    let (g, loss, kl, true_loss) = finetune_loss_graph(model, &model.params, ctx, rows, targets, kl_weight)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite fine-tuning loss (L_KL {}, L_true {}) over {} rows",
            g.scalar(kl),
            g.scalar(true_loss),
            rows.len()
        )));
    }
    Ok((value, g.backward(loss)?))
}

/// Replaces any pseudo-label head with a fresh task head and trains all
/// parameters full-batch on the labeled rows.
pub fn finetune(
    mut model: LatteModel,
    tokens: &[RowTokens],
    targets: &Targets,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::Data("the few-shot split is empty".into()));
    }
    let bias = match targets {
        Targets::Values(v) => v.iter().sum::<f64>() / v.len().max(1) as f64,
        Targets::Classes(_) => 0.0,
    };
    model.detach_pseudo_head();
    model.attach_task_head(rng::derive_seed(seed, "task-head", 0), bias);
    let rows: Vec<&RowTokens> = tokens.iter().collect();
    let dropout = model.net.config.encoder.dropout;
    let mut optimizer = Adam::new(config.learning_rate);
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..config.epochs {
        let mut ctx = ForwardCtx::train(dropout, rng::stream(seed, "finetune-dropout", epoch as u64));
        let (loss, grads) = loss_and_grads(&model, &mut ctx, &rows, targets, config.kl_weight)?;
        optimizer.step(&mut model.params, &grads)?;
        losses.push(loss);
        if loss < best - config.min_delta {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                log::debug!("early stop after epoch {epoch}: loss {loss:.6}, best {best:.6}");
                break;
            }
        }
    }
    let epochs_run = losses.len();
    Ok(FinetuneOutcome {
        model,
        losses,
        epochs_run,
    })
}

/// Predictions for `rows`, de-normalized for regression.
pub fn predict(model: &LatteModel, tokens: &[RowTokens]) -> Result<Vec<Prediction>> {
    model.predict_tokens(tokens)
}
