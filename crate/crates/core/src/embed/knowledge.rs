use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{mean_vector, render_knowledge_prompt, stub_embed_tokens, PROMPT_TEMPLATE_ID};
use crate::data::Metadata;
use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;
use crate::rng::sha256_hex;

pub const HIDDEN_STATES_URL_ENV: &str = "LATTE_HIDDEN_STATES_URL";
pub const HIDDEN_STATES_PATH: &str = "/v1/hidden_states";

/// Which transformer layer to read hidden states from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSpec {
    Index(u32),
    #[serde(with = "last_alias")]
    Last,
}

mod last_alias {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("last")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "last" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected a layer index or \"last\", got `{s}`")))
        }
    }
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec::Index(30)
    }
}

impl LayerSpec {
    /// Wire value: the index, or -1 for the last layer.
    pub fn wire(self) -> i64 {
        match self {
            LayerSpec::Index(i) => i as i64,
            LayerSpec::Last => -1,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Index(i) => write!(f, "{i}"),
            LayerSpec::Last => f.write_str("last"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(LayerSpec::Last);
        }
        s.parse()
            .map(LayerSpec::Index)
            .map_err(|_| Error::Config(format!("invalid layer `{s}`")))
    }
}

/// The task knowledge vector and its provenance. Serialized as the
/// knowledge-vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeVector {
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub layer: Option<i64>,
    pub dim: usize,
    #[serde(default)]
    pub template_id: String,
    #[serde(default)]
    pub prompt_hash: String,
    pub vector: Vec<f64>,
}

impl KnowledgeVector {
    pub fn validate(&self) -> Result<()> {
        if self.vector.len() != self.dim {
            return Err(Error::Format(format!(
                "knowledge vector has {} entries but declares dim {}",
                self.vector.len(),
                self.dim
            )));
        }
        if self.dim == 0 {
            return Err(Error::Format("knowledge vector is empty".into()));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("knowledge vector has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let kv: KnowledgeVector = serde_json::from_str(&text)?;
        kv.validate()?;
        Ok(kv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Provenance without the vector itself.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "model_id": self.model_id,
            "layer": self.layer,
            "dim": self.dim,
            "template_id": self.template_id,
            "prompt_hash": self.prompt_hash,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCalls {
    pub preprocessing: u64,
    pub training: u64,
    pub inference: u64,
}

/// Counts LLM invocations per pipeline phase.
#[derive(Debug, Default)]
pub struct LlmCallCounter {
    preprocessing: AtomicU64,
    training: AtomicU64,
    inference: AtomicU64,
}

impl LlmCallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_preprocessing(&self) {
        self.preprocessing.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_training(&self) {
        self.training.fetch_add(1, Ordering::SeqCst);
    }

    pub fn record_inference(&self) {
        self.inference.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> LlmCalls {
        LlmCalls {
            preprocessing: self.preprocessing.load(Ordering::SeqCst),
            training: self.training.load(Ordering::SeqCst),
            inference: self.inference.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KnowledgeSource {
    /// A previously extracted knowledge-vector file.
    File { path: PathBuf },
    /// A hidden-states endpoint; `url` is the server base or the full path.
    Http {
        url: String,
        model_id: String,
        retries: u32,
    },
    /// Averages stub token vectors of the prompt; stands in for an LLM.
    Stub { dim: usize, seed: u64 },
}

/// Resolves the hidden-states endpoint from the environment.
pub fn hidden_states_url() -> Option<String> {
    std::env::var(HIDDEN_STATES_URL_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
}

fn endpoint(url: &str) -> String {
    let trimmed = url.trim_end_matches('/');
    if trimmed.ends_with(HIDDEN_STATES_PATH) {
        trimmed.to_string()
    } else {
        format!("{trimmed}{HIDDEN_STATES_PATH}")
    }
}

#[derive(Debug, Serialize)]
struct HiddenStatesRequest<'a> {
    prompt: &'a str,
    layer: i64,
}

#[derive(Debug, Deserialize)]
struct HiddenStatesResponse {
    dim: usize,
    tokens: usize,
    hidden_states: Vec<Vec<f64>>,
}

/// Produces the task knowledge vector: the mean of the per-token hidden
/// states of the rendered metadata prompt at `layer`.
pub fn extract_task_knowledge(
    source: &KnowledgeSource,
    metadata: &Metadata,
    layer: LayerSpec,
    counter: &LlmCallCounter,
) -> Result<KnowledgeVector> {
    let prompt = render_knowledge_prompt(metadata);
    let prompt_hash = sha256_hex(prompt.as_bytes());
    let kv = match source {
        KnowledgeSource::File { path } => {
            let kv = KnowledgeVector::read(path)?;
            if let Some(l) = kv.layer {
                if l != layer.wire() {
                    return Err(Error::Format(format!(
                        "{} was extracted at layer {l}, configuration asks for {layer}",
                        path.display()
                    )));
                }
            }
            if !kv.prompt_hash.is_empty() && kv.prompt_hash != prompt_hash {
                return Err(Error::Format(format!(
                    "{} was extracted from a different prompt (hash {})",
                    path.display(),
                    kv.prompt_hash
                )));
            }
            kv
        }
        KnowledgeSource::Http {
            url,
            model_id,
            retries,
        } => {
            let states = fetch_hidden_states(url, &prompt, layer, *retries)?;
            counter.record_preprocessing();
            KnowledgeVector {
                model_id: model_id.clone(),
                layer: Some(layer.wire()),
                dim: states.dim,
                template_id: PROMPT_TEMPLATE_ID.into(),
                prompt_hash,
                vector: mean_vector(&states.hidden_states, states.dim)?,
            }
        }
        KnowledgeSource::Stub { dim, seed } => {
            counter.record_preprocessing();
            let tokens = stub_embed_tokens(&prompt, *dim, *seed);
            KnowledgeVector {
                model_id: stub_model_id(*dim, *seed),
                layer: Some(layer.wire()),
                dim: *dim,
                template_id: PROMPT_TEMPLATE_ID.into(),
                prompt_hash,
                vector: mean_vector(&tokens, *dim)?,
            }
        }
    };
    kv.validate()?;
    Ok(kv)
}

fn stub_model_id(dim: usize, seed: u64) -> String {
    format!("stub-d{dim}-s{seed}")
}

/// True when `kv` is what `source` would produce for `metadata` at `layer`,
/// so re-extracting can be skipped.
pub fn knowledge_is_current(source: &KnowledgeSource, kv: &KnowledgeVector, metadata: &Metadata, layer: LayerSpec) -> bool {
    let prompt_hash = sha256_hex(render_knowledge_prompt(metadata).as_bytes());
    let same_origin = match source {
        KnowledgeSource::File { .. } => true,
        KnowledgeSource::Http { model_id, .. } => &kv.model_id == model_id,
        KnowledgeSource::Stub { dim, seed } => kv.model_id == stub_model_id(*dim, *seed) && kv.dim == *dim,
    };
    same_origin
        && kv.prompt_hash == prompt_hash
        && kv.layer == Some(layer.wire())
        && kv.template_id == PROMPT_TEMPLATE_ID
        && kv.validate().is_ok()
}

fn fetch_hidden_states(
    url: &str,
    prompt: &str,
    layer: LayerSpec,
    retries: u32,
) -> Result<HiddenStatesResponse> {
    let url = endpoint(url);
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(120)))
        .build()
        .into();
    let request = HiddenStatesRequest {
        prompt,
        layer: layer.wire(),
    };
    let attempts = retries + 1;
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        match agent.post(&url).send_json(&request) {
            Ok(mut response) => {
                let parsed: HiddenStatesResponse = response
                    .body_mut()
                    .read_json()
                    .map_err(|e| Error::Format(format!("hidden-states response: {e}")))?;
                check_response(&parsed)?;
                return Ok(parsed);
            }
            Err(e) => {
                last_error = e.to_string();
                log::warn!("hidden-states request {attempt}/{attempts} to {url} failed: {e}");
                if attempt < attempts {
                    std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                }
            }
        }
    }
    Err(Error::Transport {
        url,
        attempts,
        message: last_error,
    })
}

fn check_response(r: &HiddenStatesResponse) -> Result<()> {
    if r.tokens == 0 || r.hidden_states.is_empty() {
        return Err(Error::Data("hidden-states response has no tokens".into()));
    }
    if r.hidden_states.len() != r.tokens {
        return Err(Error::Format(format!(
            "response declares {} tokens but carries {}",
            r.tokens,
            r.hidden_states.len()
        )));
    }
    if let Some(row) = r.hidden_states.iter().find(|h| h.len() != r.dim) {
        return Err(Error::Format(format!(
            "hidden state of dimension {} where {} was declared",
            row.len(),
            r.dim
        )));
    }
    if r.hidden_states.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("hidden states contain non-finite values".into()));
    }
    Ok(())
}
