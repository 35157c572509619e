//! Text embeddings for feature values, the task-knowledge prompt and vector,
//! and LLM call accounting.

mod cache;
mod knowledge;

pub use cache::{EmbeddingCache, PrecomputedEmbeddings};
pub use knowledge::{
    extract_task_knowledge, hidden_states_url, knowledge_is_current, KnowledgeSource, KnowledgeVector, LayerSpec,
    LlmCallCounter, LlmCalls, HIDDEN_STATES_PATH, HIDDEN_STATES_URL_ENV,
};

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_distr::StandardNormal;

use crate::data::{FeatureDescriptor, FeatureKind, Metadata, NormStats, RawValue, TaskType};
use crate::error::{Error, Result};
use crate::rng;

/// Identifier of the knowledge prompt template below.
pub const PROMPT_TEMPLATE_ID: &str = "latte-prompt-v1";

/// A text encoder. Implementations must be deterministic and safe for
/// concurrent reads.
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// One vector per token; at least one for any input.
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>>;

    /// Average of the token vectors.
    fn embed_mean(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = self.embed_tokens(text)?;
        mean_vector(&tokens, self.dim())
    }
}

pub(crate) fn mean_vector(rows: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Data("cannot average zero vectors".into()));
    }
    let mut mean = vec![0.0; dim];
    for row in rows {
        if row.len() != dim {
            return Err(Error::Format(format!(
                "vector of dimension {} where {dim} was declared",
                row.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Deterministic test double for a text encoder: whitespace tokens map to
/// unit-norm Gaussian directions keyed by `(token, seed)`. Empty text yields
/// the vector of the empty-token sentinel.
pub fn stub_embed_tokens(text: &str, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        tokens.push("");
    }
    tokens
        .into_iter()
        .map(|tok| {
            let mut r = rng::stream(seed, &format!("stub-token:{tok}"), dim as u64);
            let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
    id: String,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        Ok(StubEmbedder {
            dim,
            seed,
            id: format!("stub-d{dim}-s{seed}"),
        })
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(stub_embed_tokens(text, self.dim, self.seed))
    }
}

/// Where feature-value embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    Stub { dim: usize, seed: u64 },
    /// Records written by an external text encoder in the cache format.
    File {
        path: PathBuf,
        provider_id: String,
        dim: usize,
    },
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec::Stub { dim: 64, seed: 0 }
    }
}

impl EmbeddingSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSpec::Stub { dim, .. } | EmbeddingSpec::File { dim, .. } => *dim,
        }
    }

    /// Builds the provider behind an in-memory cache.
    pub fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            EmbeddingSpec::Stub { dim, seed } => {
                Box::new(EmbeddingCache::in_memory(StubEmbedder::new(*dim, *seed)?))
            }
            EmbeddingSpec::File {
                path,
                provider_id,
                dim,
            } => Box::new(PrecomputedEmbeddings::read(path, provider_id, *dim)?),
        })
    }
}

/// Text of a categorical `[name, value]` pair.
pub fn feature_value_text(name: &str, value: &str) -> String {
    format!("{name}: {value}")
}

/// Embeds one cell. Categorical: mean embedding of `"<name>: <value>"`.
/// Numerical: mean embedding of `"<name>"` scaled by the z-scored value.
pub fn embed_feature_value(
    provider: &dyn EmbeddingProvider,
    feature: &FeatureDescriptor,
    value: &RawValue,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    if feature.name.is_empty() {
        return Err(Error::Contract("feature name is empty".into()));
    }
    match feature.kind {
        FeatureKind::Categorical => {
            provider.embed_mean(&feature_value_text(&feature.name, &value.as_text()))
        }
        FeatureKind::Numerical => {
            let x = stats.normalize(&feature.name, value)?;
            let mut v = provider.embed_mean(&feature.name)?;
            v.iter_mut().for_each(|c| *c *= x);
            Ok(v)
        }
    }
}

/// Renders the knowledge-extraction prompt: task description, one line per
/// feature, then the class names for classification.
pub fn render_knowledge_prompt(metadata: &Metadata) -> String {
    let mut prompt = String::new();
    prompt.push_str("Task: ");
    prompt.push_str(&metadata.task_description);
    prompt.push('\n');
    prompt.push_str("Features:\n");
    for f in &metadata.features {
        prompt.push_str(&format!("– {}: {}\n", f.name, f.description));
    }
    if metadata.task_type == TaskType::Classification {
        prompt.push_str(&format!("Classes: {}\n", metadata.class_names.join(", ")));
    }
    prompt
}
