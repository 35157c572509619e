//! The assembled network: row tokenization, encoder, adapter and heads, plus
//! the serializable model state used by checkpoints and prediction.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig, AdapterNodes};
use crate::data::{FeatureKind, Label, Metadata, NormStats, Sample, TaskType};
use crate::embed::{embed_feature_value, EmbeddingProvider, EmbeddingSpec, KnowledgeVector};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{
    softmax_rows, Checkpoint, CheckpointManifest, FeedForward, ForwardCtx, Graph, InitScheme,
    ParameterStore, Var,
};

/// Learned value embedding shared by all features when name semantics are off.
pub const VALUE_EMBEDDING: &str = "sate.value_embedding";
pub const TASK_HEAD: &str = "head.task";
pub const PSEUDO_HEAD: &str = "head.pseudo";

const PREDICT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub head_hidden: usize,
    /// Name-aware feature embeddings. When off, every numerical value
    /// scales one shared learned vector and categorical values are embedded
    /// without their feature name.
    pub sate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            head_hidden: 256,
            sate: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        if self.adapter.model_dim != self.encoder.model_dim {
            return Err(Error::Config(format!(
                "adapter model_dim {} differs from encoder model_dim {}",
                self.adapter.model_dim, self.encoder.model_dim
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Classification { classes: usize },
    Regression,
}

impl HeadKind {
    pub fn for_metadata(metadata: &Metadata) -> Self {
        match metadata.task_type {
            TaskType::Classification => HeadKind::Classification {
                classes: metadata.num_classes(),
            },
            TaskType::Regression => HeadKind::Regression,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Classification { classes } => *classes,
            HeadKind::Regression => 1,
        }
    }
}

/// Everything besides parameters needed to rebuild and run a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub metadata: Metadata,
    pub norm_stats: NormStats,
    pub embedding: EmbeddingSpec,
    pub knowledge: KnowledgeVector,
    #[serde(default)]
    pub task_head: Option<HeadKind>,
    #[serde(default)]
    pub pseudo_classes: Option<usize>,
}

/// Token inputs of one row: `constant + factor ⊙ value_embedding`, where
/// the factor column is only used without name semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTokens {
    pub constant: Array2<f64>,
    pub factors: Option<Vec<f64>>,
}

pub fn tokenize_row(
    provider: &dyn EmbeddingProvider,
    metadata: &Metadata,
    stats: &NormStats,
    sate: bool,
    sample: &Sample,
) -> Result<RowTokens> {
    let n = metadata.features.len();
    if sample.values.len() != n {
        return Err(Error::Contract(format!(
            "row has {} values for {n} features",
            sample.values.len()
        )));
    }
    let d = provider.dim();
    let mut constant = Array2::zeros((n, d));
    let mut factors = vec![0.0; n];
    for (j, (feature, value)) in metadata.features.iter().zip(&sample.values).enumerate() {
        if sate {
            let v = embed_feature_value(provider, feature, value, stats)?;
            constant.row_mut(j).assign(&ndarray::ArrayView1::from(&v));
            continue;
        }
        match feature.kind {
            FeatureKind::Numerical => factors[j] = stats.normalize(&feature.name, value)?,
            FeatureKind::Categorical => {
                let v = provider.embed_mean(&value.as_text())?;
                constant.row_mut(j).assign(&ndarray::ArrayView1::from(&v));
            }
        }
    }
    Ok(RowTokens {
        constant,
        factors: (!sate).then_some(factors),
    })
}

pub fn tokenize_rows<'a>(
    provider: &dyn EmbeddingProvider,
    metadata: &Metadata,
    stats: &NormStats,
    sate: bool,
    rows: impl IntoIterator<Item = &'a Sample>,
) -> Result<Vec<RowTokens>> {
    rows.into_iter()
        .map(|s| tokenize_row(provider, metadata, stats, sate, s))
        .collect()
}

/// Graph nodes of a forward pass over a batch of rows.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub hidden: Var,
    pub cls: Var,
    pub feats: Var,
    pub adapter: AdapterNodes,
}

impl ForwardNodes {
    /// The representation fed to the heads.
    pub fn representation(&self) -> Var {
        self.adapter.h_llm_hat
    }
}

/// Parameter-free structure of the network. Parameter values are passed in
/// explicitly so the same structure serves training, gradient checks and
/// inference.
#[derive(Debug, Clone)]
pub struct LatteNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub task_head: Option<(HeadKind, FeedForward)>,
    pub pseudo_head: Option<(usize, FeedForward)>,
}

impl LatteNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(LatteNet {
            encoder: Encoder::new(config.encoder.clone())?,
            adapter: Adapter::new(config.adapter.clone())?,
            task_head: None,
            pseudo_head: None,
            config,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        self.encoder.init(store, seed);
        self.adapter.init(store, seed);
        if !self.config.sate {
            store.init(VALUE_EMBEDDING, (1, self.config.encoder.input_dim), InitScheme::Xavier, seed);
        }
    }

    fn head(&self, prefix: &str, outputs: usize) -> FeedForward {
        FeedForward::new(prefix, self.config.encoder.model_dim, self.config.head_hidden, outputs)
    }

    /// Fresh head whose output layer starts at zero, so initial predictions
    /// are uniform (classification) or equal to `bias` (regression).
    fn init_head(store: &mut ParameterStore, head: &FeedForward, seed: u64, bias: f64) {
        head.up.init(store, InitScheme::Kaiming, seed);
        head.down.init(store, InitScheme::Zeros, seed);
        if bias != 0.0 {
            store.insert(head.down.bias.clone(), Array2::from_elem((1, head.down.out_dim), bias));
        }
    }

    pub fn attach_task_head(&mut self, store: &mut ParameterStore, kind: HeadKind, seed: u64, bias: f64) {
        store.drop_prefix(TASK_HEAD);
        let head = self.head(TASK_HEAD, kind.outputs());
        Self::init_head(store, &head, seed, bias);
        self.task_head = Some((kind, head));
    }

    pub fn attach_pseudo_head(&mut self, store: &mut ParameterStore, classes: usize, seed: u64) {
        store.drop_prefix(PSEUDO_HEAD);
        let head = self.head(PSEUDO_HEAD, classes);
        Self::init_head(store, &head, seed, 0.0);
        self.pseudo_head = Some((classes, head));
    }

    pub fn detach_pseudo_head(&mut self, store: &mut ParameterStore) {
        store.drop_prefix(PSEUDO_HEAD);
        self.pseudo_head = None;
    }

    /// Token matrix of a batch and the per-row feature count.
    pub fn tokens(&self, g: &mut Graph, store: &ParameterStore, rows: &[&RowTokens]) -> Result<(Var, usize)> {
        let Some(first) = rows.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let (n, d) = first.constant.dim();
        if d != self.config.encoder.input_dim {
            return Err(Error::Shape(format!(
                "token dimension {d} where the encoder expects {}",
                self.config.encoder.input_dim
            )));
        }
        let mut constant = Array2::zeros((rows.len() * n, d));
        let mut factors = Array2::zeros((rows.len() * n, 1));
        for (b, r) in rows.iter().enumerate() {
            if r.constant.dim() != (n, d) {
                return Err(Error::Contract("rows in a batch differ in shape".into()));
            }
            constant
                .slice_mut(ndarray::s![b * n..(b + 1) * n, ..])
                .assign(&r.constant);
            if let Some(f) = &r.factors {
                for (j, &v) in f.iter().enumerate() {
                    factors[[b * n + j, 0]] = v;
                }
            }
        }
        let c = g.constant(constant);
        if self.config.sate {
            return Ok((c, n));
        }
        let f = g.constant(factors);
        let e = g.param(store, VALUE_EMBEDDING)?;
        let scaled = g.matmul(f, e)?;
        Ok((g.add(c, scaled)?, n))
    }

    /// Encoder and adapter over a batch. `cls_masks` (one row per batch item)
    /// multiplies the encoded CLS vectors before the adapter.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        rows: &[&RowTokens],
        h_m: &[f64],
        cls_masks: Option<&Array2<f64>>,
    ) -> Result<ForwardNodes> {
        let batch = rows.len();
        let (tokens, n) = self.tokens(g, store, rows)?;
        let mut hidden = self.encoder.forward(g, store, ctx, tokens, batch, n)?;
        if let Some(masks) = cls_masks {
            let d = self.config.encoder.model_dim;
            if masks.dim() != (batch, d) {
                return Err(Error::Shape(format!("mask shape {:?} for batch {batch}", masks.dim())));
            }
            let mut full = Array2::ones((batch * (n + 1), d));
            for b in 0..batch {
                full.row_mut(b * (n + 1)).assign(&masks.row(b));
            }
            let m = g.constant(full);
            hidden = g.mul(hidden, m)?;
        }
        let (cls, feats) = self.encoder.split(g, hidden, batch, n)?;
        let hm = g.constant(
            Array2::from_shape_vec((1, h_m.len()), h_m.to_vec()).map_err(|e| Error::Shape(e.to_string()))?,
        );
        let adapter = self.adapter.forward(g, store, ctx, hidden, cls, feats, hm, batch, n)?;
        Ok(ForwardNodes {
            hidden,
            cls,
            feats,
            adapter,
        })
    }

    pub fn task_logits(&self, g: &mut Graph, store: &ParameterStore, rep: Var) -> Result<Var> {
        let (_, head) = self
            .task_head
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no task head".into()))?;
        head.forward(g, store, rep)
    }

    pub fn pseudo_logits(&self, g: &mut Graph, store: &ParameterStore, rep: Var) -> Result<Var> {
        let (_, head) = self
            .pseudo_head
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no pseudo-label head".into()))?;
        head.forward(g, store, rep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probabilities(Vec<f64>),
    /// On the original target scale.
    Value(f64),
}

impl Prediction {
    /// Ranking score for binary AUC: the positive-class probability.
    pub fn score(&self) -> f64 {
        match self {
            Prediction::Probabilities(p) => p.last().copied().unwrap_or(0.0),
            Prediction::Value(v) => *v,
        }
    }
}

/// Network structure, parameters and the spec they were built from.
#[derive(Debug, Clone)]
pub struct LatteModel {
    pub spec: ModelSpec,
    pub net: LatteNet,
    pub params: ParameterStore,
}

impl LatteModel {
    /// Fresh model with randomly initialized backbone and no heads.
    pub fn new(mut spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.knowledge.validate()?;
        if spec.knowledge.vector.len() != spec.config.adapter.llm_dim {
            return Err(Error::Config(format!(
                "knowledge vector has dimension {} but the adapter expects {}",
                spec.knowledge.vector.len(),
                spec.config.adapter.llm_dim
            )));
        }
        if spec.embedding.dim() != spec.config.encoder.input_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} but the encoder expects {}",
                spec.embedding.dim(),
                spec.config.encoder.input_dim
            )));
        }
        spec.metadata.validate()?;
        let net = LatteNet::new(spec.config.clone())?;
        let mut params = ParameterStore::new();
        net.init(&mut params, seed);
        spec.task_head = None;
        spec.pseudo_classes = None;
        Ok(LatteModel { spec, net, params })
    }

    pub fn attach_task_head(&mut self, seed: u64, bias: f64) {
        let kind = HeadKind::for_metadata(&self.spec.metadata);
        self.net.attach_task_head(&mut self.params, kind, seed, bias);
        self.spec.task_head = Some(kind);
    }

    pub fn attach_pseudo_head(&mut self, classes: usize, seed: u64) {
        self.net.attach_pseudo_head(&mut self.params, classes, seed);
        self.spec.pseudo_classes = Some(classes);
    }

    pub fn detach_pseudo_head(&mut self) {
        self.net.detach_pseudo_head(&mut self.params);
        self.spec.pseudo_classes = None;
    }

    pub fn tokenize<'a>(
        &self,
        provider: &dyn EmbeddingProvider,
        rows: impl IntoIterator<Item = &'a Sample>,
    ) -> Result<Vec<RowTokens>> {
        if provider.dim() != self.spec.config.encoder.input_dim {
            return Err(Error::Config(format!(
                "provider dimension {} but the encoder expects {}",
                provider.dim(),
                self.spec.config.encoder.input_dim
            )));
        }
        tokenize_rows(
            provider,
            &self.spec.metadata,
            &self.spec.norm_stats,
            self.spec.config.sate,
            rows,
        )
    }

    /// Eval-mode predictions; never mutates parameters or calls the LLM.
    pub fn predict_tokens(&self, tokens: &[RowTokens]) -> Result<Vec<Prediction>> {
        let kind = self
            .spec
            .task_head
            .ok_or_else(|| Error::Contract("model has no task head".into()))?;
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(PREDICT_BATCH) {
            let rows: Vec<&RowTokens> = chunk.iter().collect();
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let nodes = self
                .net
                .forward(&mut g, &self.params, &mut ctx, &rows, &self.spec.knowledge.vector, None)?;
            let logits = self.net.task_logits(&mut g, &self.params, nodes.representation())?;
            let logits = g.value(logits);
            match kind {
                HeadKind::Classification { .. } => out.extend(
                    softmax_rows(logits.view())
                        .axis_iter(Axis(0))
                        .map(|r| Prediction::Probabilities(r.to_vec())),
                ),
                HeadKind::Regression => out.extend(
                    logits
                        .column(0)
                        .iter()
                        .map(|&y| Prediction::Value(self.spec.norm_stats.denormalize_target(y))),
                ),
            }
        }
        Ok(out)
    }

    pub fn predict(&self, provider: &dyn EmbeddingProvider, rows: &[Sample]) -> Result<Vec<Prediction>> {
        let tokens = self.tokenize(provider, rows)?;
        self.predict_tokens(&tokens)
    }

    pub fn to_checkpoint(&self, stage: &str, config_hash: &str, seed: u64, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut extra_obj = serde_json::Map::new();
        extra_obj.insert("model".into(), serde_json::to_value(&self.spec)?);
        if !extra.is_null() {
            extra_obj.insert("run".into(), extra);
        }
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                stage: stage.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                extra: serde_json::Value::Object(extra_obj),
            },
            tensors: self.params.clone(),
        })
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let spec_value = checkpoint
            .manifest
            .extra
            .get("model")
            .ok_or_else(|| Error::Format("checkpoint manifest lacks a model block".into()))?;
        let spec: ModelSpec = serde_json::from_value(spec_value.clone())?;
        let mut net = LatteNet::new(spec.config.clone())?;
        if let Some(kind) = spec.task_head {
            net.task_head = Some((kind, net.head(TASK_HEAD, kind.outputs())));
        }
        if let Some(k) = spec.pseudo_classes {
            net.pseudo_head = Some((k, net.head(PSEUDO_HEAD, k)));
        }
        let mut expected = ParameterStore::new();
        net.init(&mut expected, 0);
        let heads = net.task_head.iter().map(|(_, h)| h).chain(net.pseudo_head.iter().map(|(_, h)| h));
        for h in heads {
            LatteNet::init_head(&mut expected, h, 0, 0.0);
        }
        for (name, t) in expected.iter() {
            match checkpoint.tensors.get(name) {
                Some(v) if v.dim() == t.dim() => {}
                Some(v) => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        v.dim(),
                        t.dim()
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint lacks tensor {name}"))),
            }
        }
        Ok(LatteModel {
            spec,
            net,
            params: checkpoint.tensors.clone(),
        })
    }
}

/// Label of a sample as a class index or a normalized target.
pub fn label_target(label: &Label, kind: HeadKind, stats: &NormStats) -> Result<f64> {
    match (label, kind) {
        (Label::Class(c), HeadKind::Classification { classes }) if *c < classes => Ok(*c as f64),
        (Label::Class(c), HeadKind::Classification { classes }) => Err(Error::Contract(format!(
            "class index {c} out of range for {classes} classes"
        ))),
        (Label::Value(y), HeadKind::Regression) => Ok(stats.normalize_target(*y)),
        _ => Err(Error::Contract("label type does not match the task type".into())),
    }
}
