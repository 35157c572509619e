//! Semantic-aware tabular encoder: a learned CLS token prepended to the
//! projected feature embeddings, refined by a transformer with no positional
//! signal.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Graph, InitScheme, Linear, ParameterStore, TransformerBlock, Var};

pub const PREFIX: &str = "sate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Dimension of the incoming text embeddings.
    pub input_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            model_dim: 128,
            ffn_dim: 256,
            layers: 2,
            heads: 8,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config("encoder dimensions must be at least 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Refined representations of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRow {
    pub h_cls: Vec<f64>,
    pub h_features: Vec<Vec<f64>>,
    pub feature_order: Vec<String>,
}

impl EncodedRow {
    /// `[ĥ_CLS; ĥ_1; …; ĥ_n]` as an (n+1)×d matrix.
    pub fn stacked(&self) -> Array2<f64> {
        let d = self.h_cls.len();
        let mut m = Array2::zeros((self.h_features.len() + 1, d));
        m.row_mut(0).assign(&ndarray::ArrayView1::from(&self.h_cls));
        for (i, f) in self.h_features.iter().enumerate() {
            m.row_mut(i + 1).assign(&ndarray::ArrayView1::from(f));
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_proj: Linear,
    pub cls: String,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(
                    &format!("{PREFIX}.block{i}"),
                    config.model_dim,
                    config.heads,
                    config.ffn_dim,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            input_proj: Linear::new(&format!("{PREFIX}.input_proj"), config.input_dim, config.model_dim),
            cls: format!("{PREFIX}.cls"),
            blocks,
            config,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        self.input_proj.init(store, InitScheme::Kaiming, seed);
        let bound = 1.0 / (self.config.input_dim as f64).sqrt();
        store.init_uniform(&self.input_proj.bias, (1, self.config.model_dim), bound, seed);
        store.init(&self.cls, (1, self.config.model_dim), InitScheme::Xavier, seed);
        for b in &self.blocks {
            b.init(store, seed);
        }
    }

    /// Encodes `batch` rows of `n` features. `tokens` is `(batch·n)×input_dim`
    /// with each row's features contiguous. Returns the hidden states as
    /// `(batch·(n+1))×model_dim`, each row laid out as `[CLS, f_1..f_n]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        tokens: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var> {
        if n == 0 {
            return Err(Error::Contract("a row needs at least one feature".into()));
        }
        let dims = g.value(tokens).dim();
        if dims != (batch * n, self.config.input_dim) {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} tokens, got {dims:?}",
                batch * n,
                self.config.input_dim
            )));
        }
        let projected = self.input_proj.forward(g, store, tokens)?;
        let cls = g.param(store, &self.cls)?;
        let pool = g.concat_rows(&[cls, projected])?;
        let mut layout = Vec::with_capacity(batch * (n + 1));
        for b in 0..batch {
            layout.push(0);
            layout.extend((0..n).map(|j| 1 + b * n + j));
        }
        let mut h = g.gather(pool, layout)?;
        for block in &self.blocks {
            h = block.forward(g, store, ctx, h, batch, n + 1)?;
        }
        Ok(h)
    }

    /// Splits hidden states into `(cls: batch×d, features: (batch·n)×d)`.
    pub fn split(&self, g: &mut Graph, hidden: Var, batch: usize, n: usize) -> Result<(Var, Var)> {
        let t = n + 1;
        let cls = g.gather(hidden, (0..batch).map(|b| b * t).collect())?;
        let feats = g.gather(
            hidden,
            (0..batch)
                .flat_map(|b| (1..t).map(move |j| b * t + j))
                .collect(),
        )?;
        Ok((cls, feats))
    }
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

/// Encodes a single row given `(feature name, embedding)` pairs, eval mode.
pub fn encode_row(
    encoder: &Encoder,
    store: &ParameterStore,
    features: &[(String, Vec<f64>)],
) -> Result<EncodedRow> {
    Ok(encode_batch(encoder, store, &[features.to_vec()])?.remove(0))
}

/// Encodes rows that share one schema (same feature names, same order).
pub fn encode_batch(
    encoder: &Encoder,
    store: &ParameterStore,
    rows: &[Vec<(String, Vec<f64>)>],
) -> Result<Vec<EncodedRow>> {
    let Some(first) = rows.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    if n == 0 {
        return Err(Error::Contract("a row needs at least one feature".into()));
    }
    let d_in = encoder.config.input_dim;
    let mut tokens = Array2::zeros((rows.len() * n, d_in));
    for (b, row) in rows.iter().enumerate() {
        if row.len() != n || row.iter().zip(first).any(|(a, f)| a.0 != f.0) {
            return Err(Error::Contract(format!("row {b} does not share the batch schema")));
        }
        for (j, (_, v)) in row.iter().enumerate() {
            if v.len() != d_in {
                return Err(Error::Shape(format!(
                    "feature embedding of dimension {} where {d_in} was expected",
                    v.len()
                )));
            }
            tokens
                .row_mut(b * n + j)
                .assign(&ndarray::ArrayView1::from(v));
        }
    }
    let mut g = Graph::new();
    let t = g.constant(tokens);
    let mut ctx = ForwardCtx::eval();
    let hidden = encoder.forward(&mut g, store, &mut ctx, t, rows.len(), n)?;
    let (cls, feats) = encoder.split(&mut g, hidden, rows.len(), n)?;
    let cls = to_rows(g.value(cls));
    let feats = to_rows(g.value(feats));
    let order: Vec<String> = first.iter().map(|(name, _)| name.clone()).collect();
    Ok(cls
        .into_iter()
        .enumerate()
        .map(|(b, h_cls)| EncodedRow {
            h_cls,
            h_features: feats[b * n..(b + 1) * n].to_vec(),
            feature_order: order.clone(),
        })
        .collect())
}
