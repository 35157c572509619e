//! Parameterized blocks built on the tape. Each block only knows its
//! parameter names; values live in a [`ParameterStore`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{InitScheme, ParameterStore};
use super::tape::{AttentionSpec, Graph, Var};
use crate::error::{Error, Result};

/// Per-forward state: dropout is active only when `dropout` is set.
pub struct ForwardCtx {
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { dropout: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout: (rate > 0.0).then_some((rate, rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Inverted dropout with a constant 0/(1/(1-p)) mask.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let mask = Array2::from_shape_simple_fn(g.value(x).raw_dim(), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, scheme: InitScheme, seed: u64) {
        store.init(&self.weight, (self.in_dim, self.out_dim), scheme, seed);
        store.init(&self.bias, (1, self.out_dim), InitScheme::Zeros, seed);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        store.init(&self.gamma, (1, self.dim), InitScheme::Ones, seed);
        store.init(&self.beta, (1, self.dim), InitScheme::Zeros, seed);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize, out: usize) -> Self {
        FeedForward {
            up: Linear::new(&format!("{prefix}.up"), dim, hidden),
            down: Linear::new(&format!("{prefix}.down"), hidden, out),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        self.up.init(store, InitScheme::Kaiming, seed);
        self.down.init(store, InitScheme::Xavier, seed);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Multi-head attention with optional learned projections. Without
/// projections the inputs are attended over directly.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub heads: usize,
    pub model_dim: usize,
    pub projections: Option<[Linear; 4]>,
}

impl AttentionBlock {
    pub fn new(prefix: &str, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        let p = |n: &str| Linear::new(&format!("{prefix}.{n}"), model_dim, model_dim);
        Ok(AttentionBlock {
            heads,
            model_dim,
            projections: Some([p("query"), p("key"), p("value"), p("output")]),
        })
    }

    pub fn without_projections(model_dim: usize, heads: usize) -> Self {
        AttentionBlock {
            heads,
            model_dim,
            projections: None,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        if let Some(ps) = &self.projections {
            for p in ps {
                p.init(store, InitScheme::Xavier, seed);
            }
        }
    }

    /// `queries` is `(batch·q_len)×d`, `keys_values` is `(batch·kv_len)×d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: Var,
        keys_values: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
    ) -> Result<Var> {
        let spec = AttentionSpec {
            heads: self.heads,
            batch,
            q_len,
            kv_len,
        };
        match &self.projections {
            None => g.attention(queries, keys_values, keys_values, spec),
            Some([wq, wk, wv, wo]) => {
                let q = wq.forward(g, store, queries)?;
                let k = wk.forward(g, store, keys_values)?;
                let v = wv.forward(g, store, keys_values)?;
                let o = g.attention(q, k, v, spec)?;
                wo.forward(g, store, o)
            }
        }
    }
}

/// Pre-norm transformer block, no positional signal.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attention: AttentionBlock,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(prefix: &str, model_dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm_attn: LayerNorm::new(&format!("{prefix}.norm_attn"), model_dim),
            attention: AttentionBlock::new(&format!("{prefix}.attn"), model_dim, heads)?,
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), model_dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), model_dim, ffn_dim, model_dim),
        })
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        self.norm_attn.init(store, seed);
        self.attention.init(store, seed);
        self.norm_ffn.init(store, seed);
        self.ffn.init(store, seed);
    }

    /// Self-attention over `batch` groups of `seq_len` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        x: Var,
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x)?;
        let a = self.attention.forward(g, store, h, h, batch, seq_len, seq_len)?;
        let a = ctx.dropout(g, a)?;
        let x = g.add(x, a)?;
        let h = self.norm_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = ctx.dropout(g, f)?;
        g.add(x, f)
    }
}
