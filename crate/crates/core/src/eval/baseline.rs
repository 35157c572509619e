//! Linear sanity baselines on one-hot categorical plus z-scored numerical
//! features.

use std::collections::BTreeSet;

use crate::data::{FeatureKind, Label, Metadata, NormStats, RawValue, Sample, TaskType};
use crate::error::{Error, Result};

use super::metrics::{auc_multiclass, mse};

pub const DEFAULT_L2: f64 = 1e-2;
const MAX_ITERATIONS: usize = 50_000;
const GRADIENT_TOL: f64 = 1e-9;

/// Maps rows to dense design vectors. Categorical vocabularies come from the
/// rows the featurizer was fitted on; unseen values encode as all zeros.
#[derive(Debug, Clone)]
pub struct Featurizer {
    metadata: Metadata,
    stats: NormStats,
    vocab: Vec<Vec<String>>,
}

impl Featurizer {
    pub fn fit(metadata: &Metadata, stats: &NormStats, rows: &[&Sample]) -> Self {
        let vocab = metadata
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match f.kind {
                FeatureKind::Numerical => Vec::new(),
                FeatureKind::Categorical => rows
                    .iter()
                    .filter_map(|r| match &r.values[j] {
                        RawValue::Missing => None,
                        v => Some(v.as_text()),
                    })
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            })
            .collect();
        Featurizer {
            metadata: metadata.clone(),
            stats: stats.clone(),
            vocab,
        }
    }

    pub fn width(&self) -> usize {
        self.metadata
            .features
            .iter()
            .zip(&self.vocab)
            .map(|(f, v)| match f.kind {
                FeatureKind::Numerical => 1,
                FeatureKind::Categorical => v.len(),
            })
            .sum()
    }

    pub fn transform(&self, row: &Sample) -> Result<Vec<f64>> {
        if row.values.len() != self.metadata.features.len() {
            return Err(Error::Schema(format!(
                "row has {} values for {} features",
                row.values.len(),
                self.metadata.features.len()
            )));
        }
        let mut x = Vec::with_capacity(self.width());
        for ((f, vocab), value) in self.metadata.features.iter().zip(&self.vocab).zip(&row.values) {
            match f.kind {
                FeatureKind::Numerical => x.push(self.stats.normalize(&f.name, value)?),
                FeatureKind::Categorical => {
                    let text = (!matches!(value, RawValue::Missing)).then(|| value.as_text());
                    x.extend(vocab.iter().map(|v| f64::from(text.as_deref() == Some(v))));
                }
            }
        }
        Ok(x)
    }
}

/// Multinomial logistic regression with an L2 penalty on the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// `classes × width`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        softmax(&mut z);
        z
    }

    /// Full-batch gradient descent on the mean cross-entropy plus
    /// `l2/2·‖W‖²`, stopped once the gradient's max-norm drops below tolerance.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, l2: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Contract(format!("{} rows for {} labels", xs.len(), ys.len())));
        }
        let distinct: BTreeSet<usize> = ys.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::UndefinedMetric(
                "the training set holds a single class; no model can be fitted".into(),
            ));
        }
        let width = xs[0].len();
        let n = xs.len() as f64;
        let mut model = LogisticModel {
            weights: vec![vec![0.0; width]; classes],
            bias: vec![0.0; classes],
        };
        // Step size from a bound on the loss curvature.
        let max_sq = xs.iter().map(|x| 1.0 + x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let lr = 1.0 / (0.5 * max_sq + l2);
        for _ in 0..MAX_ITERATIONS {
            let mut gw = vec![vec![0.0; width]; classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(ys) {
                let mut p = model.predict_proba(x);
                p[y] -= 1.0;
                for c in 0..classes {
                    gb[c] += p[c] / n;
                    for (g, v) in gw[c].iter_mut().zip(x) {
                        *g += p[c] * v / n;
                    }
                }
            }
            let mut largest: f64 = 0.0;
            for c in 0..classes {
                for (g, w) in gw[c].iter_mut().zip(&model.weights[c]) {
                    *g += l2 * w;
                    largest = largest.max(g.abs());
                }
                largest = largest.max(gb[c].abs());
            }
            for c in 0..classes {
                for (w, g) in model.weights[c].iter_mut().zip(&gw[c]) {
                    *w -= lr * g;
                }
                model.bias[c] -= lr * gb[c];
            }
            if largest < GRADIENT_TOL {
                break;
            }
        }
        Ok(model)
    }
}

/// Ridge regression solved in closed form; the bias is not penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn fit(xs: &[Vec<f64>], ys: &[f64], l2: f64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Contract(format!("{} rows for {} targets", xs.len(), ys.len())));
        }
        let width = xs[0].len();
        let p = width + 1;
        let n = xs.len() as f64;
        // Normal equations of the mean squared error, bias in the last slot.
        let mut a = vec![vec![0.0; p]; p];
        let mut b = vec![0.0; p];
        for (x, &y) in xs.iter().zip(ys) {
            let row: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..p {
                b[i] += row[i] * y / n;
                for j in 0..p {
                    a[i][j] += row[i] * row[j] / n;
                }
            }
        }
        for (i, r) in a.iter_mut().enumerate().take(width) {
            r[i] += l2;
        }
        let solution = solve(a, b)?;
        Ok(LinearModel {
            weights: solution[..width].to_vec(),
            bias: solution[width],
        })
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Numerical("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

fn class_of(sample: &Sample) -> Result<usize> {
    match sample.label {
        Some(Label::Class(c)) => Ok(c),
        _ => Err(Error::Contract("classification row without a class label".into())),
    }
}

fn value_of(sample: &Sample) -> Result<f64> {
    match sample.label {
        Some(Label::Value(y)) => Ok(y),
        _ => Err(Error::Contract("regression row without a target".into())),
    }
}

/// Test AUC of an L2 logistic regression fitted on the few-shot rows.
pub fn logistic_baseline(metadata: &Metadata, stats: &NormStats, few_shot: &[&Sample], test: &[Sample]) -> Result<f64> {
    if metadata.task_type != TaskType::Classification {
        return Err(Error::Contract("the logistic baseline needs a classification task".into()));
    }
    let features = Featurizer::fit(metadata, stats, few_shot);
    let xs: Vec<Vec<f64>> = few_shot.iter().map(|r| features.transform(r)).collect::<Result<_>>()?;
    let ys: Vec<usize> = few_shot.iter().map(|r| class_of(r)).collect::<Result<_>>()?;
    let model = LogisticModel::fit(&xs, &ys, metadata.num_classes(), DEFAULT_L2)?;
    let probs: Vec<Vec<f64>> = test
        .iter()
        .map(|r| features.transform(r).map(|x| model.predict_proba(&x)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = test.iter().map(class_of).collect::<Result<_>>()?;
    auc_multiclass(&probs, &labels)
}

/// Test MSE, in normalized target space, of a ridge regression fitted on
/// the few-shot rows.
pub fn linear_baseline(metadata: &Metadata, stats: &NormStats, few_shot: &[&Sample], test: &[Sample]) -> Result<f64> {
    if metadata.task_type != TaskType::Regression {
        return Err(Error::Contract("the linear baseline needs a regression task".into()));
    }
    let features = Featurizer::fit(metadata, stats, few_shot);
    let xs: Vec<Vec<f64>> = few_shot.iter().map(|r| features.transform(r)).collect::<Result<_>>()?;
    let ys: Vec<f64> = few_shot
        .iter()
        .map(|r| value_of(r).map(|y| stats.normalize_target(y)))
        .collect::<Result<_>>()?;
    let model = LinearModel::fit(&xs, &ys, DEFAULT_L2)?;
    let preds: Vec<f64> = test
        .iter()
        .map(|r| features.transform(r).map(|x| model.predict(&x)))
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = test
        .iter()
        .map(|r| value_of(r).map(|y| stats.normalize_target(y)))
        .collect::<Result<_>>()?;
    mse(&preds, &targets)
}

/// The baseline matching the task type: AUC for classification, MSE for
/// regression.
pub fn baseline(metadata: &Metadata, stats: &NormStats, few_shot: &[&Sample], test: &[Sample]) -> Result<f64> {
    match metadata.task_type {
        TaskType::Classification => logistic_baseline(metadata, stats, few_shot, test),
        TaskType::Regression => linear_baseline(metadata, stats, few_shot, test),
    }
}
