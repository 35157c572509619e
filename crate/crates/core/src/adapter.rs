//! Knowledge adapter: a cross-attention query over the encoded features, a
//! temperature-scaled KL pull toward the projected knowledge vector, fusion of
//! the encoded row under the knowledge query, and a constant gate with the
//! CLS representation.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embed::KnowledgeVector;
use crate::encoder::EncodedRow;
use crate::error::{Error, Result};
use crate::nn::{
    kl_divergence, kl_rows, scaled_attention, AttentionBlock, FeedForward, ForwardCtx, Graph,
    InitScheme, LayerNorm, ParameterStore, Var,
};

pub const PREFIX: &str = "adapter";

/// Bias shift of the identity-initialized g transform. GELU(x + s) - s equals
/// x to within 1e-9 for x > -(s - 4).
pub const G_SHIFT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub layers: usize,
    pub heads: usize,
    pub tau: f64,
    pub eta: f64,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Dimension of the knowledge vector.
    pub llm_dim: usize,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            layers: 2,
            heads: 2,
            tau: 4.0,
            eta: 0.5,
            model_dim: 128,
            ffn_dim: 256,
            llm_dim: 64,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        check_eta(self.eta)?;
        if self.model_dim == 0 || self.llm_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("adapter dimensions must be at least 1".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
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

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterOutput {
    pub q: Vec<f64>,
    pub q_llm: Vec<f64>,
    /// Fusion weights over `[ĥ_CLS, ĥ_1..ĥ_n]`.
    pub attention: Vec<f64>,
    pub h_llm: Vec<f64>,
    pub h_llm_hat: Vec<f64>,
    pub kl_loss: f64,
}

/// One GTransformer layer: the query stream attends to the features.
#[derive(Debug, Clone)]
struct CrossBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attention: AttentionBlock,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl CrossBlock {
    fn new(prefix: &str, d: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(CrossBlock {
            norm_q: LayerNorm::new(&format!("{prefix}.norm_q"), d),
            norm_kv: LayerNorm::new(&format!("{prefix}.norm_kv"), d),
            attention: AttentionBlock::new(&format!("{prefix}.attn"), d, heads)?,
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, ffn_dim, d),
        })
    }

    fn init(&self, store: &mut ParameterStore, seed: u64) {
        self.norm_q.init(store, seed);
        self.norm_kv.init(store, seed);
        self.attention.init(store, seed);
        self.norm_ffn.init(store, seed);
        self.ffn.init(store, seed);
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        q: Var,
        feats: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var> {
        let hq = self.norm_q.forward(g, store, q)?;
        let kv = self.norm_kv.forward(g, store, feats)?;
        let a = self.attention.forward(g, store, hq, kv, batch, 1, n)?;
        let a = ctx.dropout(g, a)?;
        let q = g.add(q, a)?;
        let h = self.norm_ffn.forward(g, store, q)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = ctx.dropout(g, f)?;
        g.add(q, f)
    }
}

/// Graph nodes of one adapter pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    /// batch × d
    pub q: Var,
    /// 1 × d
    pub q_llm: Var,
    /// batch × 1
    pub kl: Var,
    /// Fusion attention output (batch × d); weights via `Graph::attention_weights`.
    pub h_llm: Var,
    /// batch × d
    pub h_llm_hat: Var,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub w0: String,
    blocks: Vec<CrossBlock>,
    g_transform: FeedForward,
}

impl Adapter {
    pub fn new(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let blocks = (0..config.layers)
            .map(|i| CrossBlock::new(&format!("{PREFIX}.gtransformer{i}"), d, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        Ok(Adapter {
            w0: format!("{PREFIX}.w0"),
            blocks,
            g_transform: FeedForward::new(&format!("{PREFIX}.g"), d, d, d),
            config,
        })
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        let d = self.config.model_dim;
        store.init(&self.w0, (self.config.llm_dim, d), InitScheme::Kaiming, seed);
        for b in &self.blocks {
            b.init(store, seed);
        }
        let eye = Array2::eye(d);
        let g = &self.g_transform;
        store.insert(g.up.weight.clone(), eye.clone());
        store.insert(g.up.bias.clone(), Array2::from_elem((1, d), G_SHIFT));
        store.insert(g.down.weight.clone(), eye);
        store.insert(g.down.bias.clone(), Array2::from_elem((1, d), -G_SHIFT));
    }

    /// Cross-attention query seeded by `cls` (batch×d) over `feats`
    /// ((batch·n)×d).
    pub fn global_query_nodes(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        cls: Var,
        feats: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var> {
        if n == 0 {
            return Err(Error::Contract("the global query needs at least one feature".into()));
        }
        let mut q = cls;
        for b in &self.blocks {
            q = b.forward(g, store, ctx, q, feats, batch, n)?;
        }
        Ok(q)
    }

    /// `h_M · W_0` for a 1×d_llm knowledge row.
    pub fn project_knowledge_nodes(&self, g: &mut Graph, store: &ParameterStore, h_m: Var) -> Result<Var> {
        let w0 = g.param(store, &self.w0)?;
        g.matmul(h_m, w0)
    }

    pub fn g_nodes(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.g_transform.forward(g, store, x)
    }

    /// `η·g(h_llm) + (1-η)·cls`, exact at both ends of the gate.
    pub fn gate_nodes(&self, g: &mut Graph, store: &ParameterStore, h_llm: Var, cls: Var, eta: f64) -> Result<Var> {
        check_eta(eta)?;
        if eta == 0.0 {
            return Ok(cls);
        }
        let transformed = self.g_nodes(g, store, h_llm)?;
        if eta == 1.0 {
            return Ok(transformed);
        }
        let a = g.scale(transformed, eta);
        let b = g.scale(cls, 1.0 - eta);
        g.add(a, b)
    }

    /// Full adapter pass. `hidden` is the encoder output laid out as
    /// `batch` groups of `[CLS, f_1..f_n]`; `cls` and `feats` are its split.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &mut ForwardCtx,
        hidden: Var,
        cls: Var,
        feats: Var,
        h_m: Var,
        batch: usize,
        n: usize,
    ) -> Result<AdapterNodes> {
        let q = self.global_query_nodes(g, store, ctx, cls, feats, batch, n)?;
        let q_llm = self.project_knowledge_nodes(g, store, h_m)?;
        let q_llm_b = g.gather(q_llm, vec![0; batch])?;
        let kl = kl_rows(g, q_llm_b, q, self.config.tau)?;
        let fusion = AttentionBlock::without_projections(self.config.model_dim, 1);
        let h_llm = fusion.forward(g, store, q_llm_b, hidden, batch, 1, n + 1)?;
        let h_llm_hat = self.gate_nodes(g, store, h_llm, cls, self.config.eta)?;
        Ok(AdapterNodes {
            q,
            q_llm,
            kl,
            h_llm,
            h_llm_hat,
        })
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn check_row(encoded: &EncodedRow, d: usize) -> Result<()> {
    if encoded.h_features.is_empty() {
        return Err(Error::Contract("encoded row has no features".into()));
    }
    if encoded.h_cls.len() != d || encoded.h_features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape(format!("encoded row is not of model dimension {d}")));
    }
    Ok(())
}

fn check_knowledge(adapter: &Adapter, h_m: &KnowledgeVector) -> Result<()> {
    if h_m.vector.len() != adapter.config.llm_dim {
        return Err(Error::Shape(format!(
            "knowledge vector of dimension {} where {} was configured",
            h_m.vector.len(),
            adapter.config.llm_dim
        )));
    }
    Ok(())
}

/// Eval-mode global query of one encoded row.
pub fn global_query(adapter: &Adapter, store: &ParameterStore, encoded: &EncodedRow) -> Result<Vec<f64>> {
    if encoded.h_features.is_empty() {
        return Err(Error::Contract("the global query needs at least one feature".into()));
    }
    check_row(encoded, adapter.config.model_dim)?;
    let mut g = Graph::new();
    let stacked = encoded.stacked();
    let n = encoded.h_features.len();
    let cls = g.constant(stacked.slice(ndarray::s![0..1, ..]).to_owned());
    let feats = g.constant(stacked.slice(ndarray::s![1.., ..]).to_owned());
    let q = adapter.global_query_nodes(&mut g, store, &mut ForwardCtx::eval(), cls, feats, 1, n)?;
    Ok(g.value(q).row(0).to_vec())
}

/// `W_0 h_M` as a model_dim vector.
pub fn project_knowledge(adapter: &Adapter, store: &ParameterStore, h_m: &KnowledgeVector) -> Result<Vec<f64>> {
    check_knowledge(adapter, h_m)?;
    let w0 = store
        .get(&adapter.w0)
        .ok_or_else(|| Error::Contract(format!("missing parameter {}", adapter.w0)))?;
    Ok(ArrayView1::from(&h_m.vector).dot(w0).to_vec())
}

/// `KL(softmax(W_0 h_M / τ) ‖ softmax(q / τ))` over the model_dim axis.
pub fn distill_loss(
    adapter: &Adapter,
    store: &ParameterStore,
    h_m: &KnowledgeVector,
    q: &[f64],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let q_llm = project_knowledge(adapter, store, h_m)?;
    kl_divergence(ArrayView1::from(&q_llm), ArrayView1::from(q), tau)
}

/// Parameter-free attention of `q_llm` over `[ĥ_CLS, ĥ_1..ĥ_n]`.
pub fn knowledge_fusion(encoded: &EncodedRow, q_llm: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_row(encoded, q_llm.len())?;
    let stacked = encoded.stacked();
    let q = row(q_llm);
    let (out, weights) = scaled_attention(q.view(), stacked.view(), stacked.view())?;
    Ok((out.row(0).to_vec(), weights.row(0).to_vec()))
}

/// `η·g(h_llm; φ) + (1-η)·h_cls`.
pub fn gated_combine(
    adapter: &Adapter,
    store: &ParameterStore,
    h_llm: &[f64],
    h_cls: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    check_eta(eta)?;
    if h_llm.len() != h_cls.len() {
        return Err(Error::Shape(format!("gate inputs of length {} and {}", h_llm.len(), h_cls.len())));
    }
    let mut g = Graph::new();
    let a = g.constant(row(h_llm));
    let b = g.constant(row(h_cls));
    let out = adapter.gate_nodes(&mut g, store, a, b, eta)?;
    Ok(g.value(out).row(0).to_vec())
}

/// Eval-mode composition of the adapter operations for one row.
pub fn adapter_forward(
    adapter: &Adapter,
    store: &ParameterStore,
    encoded: &EncodedRow,
    h_m: &KnowledgeVector,
) -> Result<AdapterOutput> {
    check_row(encoded, adapter.config.model_dim)?;
    check_knowledge(adapter, h_m)?;
    let q = global_query(adapter, store, encoded)?;
    let q_llm = project_knowledge(adapter, store, h_m)?;
    let kl_loss = kl_divergence(ArrayView1::from(&q_llm), ArrayView1::from(&q), adapter.config.tau)?;
    let (h_llm, attention) = knowledge_fusion(encoded, &q_llm)?;
    let h_llm_hat = gated_combine(adapter, store, &h_llm, &encoded.h_cls, adapter.config.eta)?;
    Ok(AdapterOutput {
        q,
        q_llm,
        attention,
        h_llm,
        h_llm_hat,
        kl_loss,
    })
}

/// Attention weights of a single-query fusion node, one row per batch item.
pub fn fusion_weights(g: &Graph, node: Var) -> Option<Array2<f64>> {
    let (w, spec) = g.attention_weights(node)?;
    let per = spec.q_len * spec.kv_len * spec.heads;
    let rows: Vec<f64> = (0..spec.batch).flat_map(|b| w[b * per..b * per + spec.kv_len].to_vec()).collect();
    Array2::from_shape_vec((spec.batch, spec.kv_len), rows).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(d: usize, llm: usize) -> AdapterConfig {
        AdapterConfig {
            model_dim: d,
            llm_dim: llm,
            ffn_dim: 2 * d,
            dropout: 0.0,
            ..AdapterConfig::default()
        }
    }

    fn setup(c: AdapterConfig, seed: u64) -> (Adapter, ParameterStore) {
        let a = Adapter::new(c).unwrap();
        let mut s = ParameterStore::new();
        a.init(&mut s, seed);
        (a, s)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_row(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EncodedRow {
        EncodedRow {
            h_cls: rand_vec(rng, d),
            h_features: (0..n).map(|_| rand_vec(rng, d)).collect(),
            feature_order: (0..n).map(|j| format!("f{j}")).collect(),
        }
    }

    fn knowledge(v: Vec<f64>) -> KnowledgeVector {
        KnowledgeVector {
            model_id: "test".into(),
            layer: None,
            dim: v.len(),
            template_id: String::new(),
            prompt_hash: String::new(),
            vector: v,
        }
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn config_validation() {
        assert!(Adapter::new(AdapterConfig { eta: 1.5, ..config(8, 4) }).is_err());
        assert!(Adapter::new(AdapterConfig { tau: 0.0, ..config(8, 4) }).is_err());
        assert!(Adapter::new(AdapterConfig { heads: 3, ..config(8, 4) }).is_err());
    }

    #[test]
    fn single_feature_query_is_deterministic() {
        let (a, s) = setup(config(8, 4), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rand_row(&mut rng, 1, 8);
        let q = global_query(&a, &s, &r).unwrap();
        assert_eq!(q.len(), 8);
        assert_eq!(q, global_query(&a, &s, &r).unwrap());
        let r4 = rand_row(&mut rng, 4, 8);
        assert_eq!(global_query(&a, &s, &r4).unwrap(), global_query(&a, &s, &r4).unwrap());
    }

    #[test]
    fn duplicated_single_feature_leaves_query_unchanged() {
        let (a, s) = setup(config(8, 4), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rand_row(&mut rng, 1, 8);
        let mut dup = r.clone();
        dup.h_features.push(r.h_features[0].clone());
        dup.feature_order.push("f0_copy".into());
        let q1 = global_query(&a, &s, &r).unwrap();
        let q2 = global_query(&a, &s, &dup).unwrap();
        assert!(max_abs(&q1, &q2) < 1e-6);
    }

    #[test]
    fn zero_features_rejected() {
        let (a, s) = setup(config(8, 4), 2);
        let r = EncodedRow {
            h_cls: vec![0.0; 8],
            h_features: vec![],
            feature_order: vec![],
        };
        assert!(matches!(global_query(&a, &s, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn distill_loss_cases() {
        let (a, mut s) = setup(config(2, 2), 3);
        s.insert("adapter.w0", Array2::eye(2));
        let h = knowledge(vec![1.0, 0.0]);
        assert_eq!(distill_loss(&a, &s, &h, &[1.0, 0.0], 1.0).unwrap(), 0.0);
        // Two-point closed form: p = softmax([1,0]), q = softmax([0,1]).
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let p0 = 1.0 - p1;
        let expected = p1 * (p1 / p0).ln() + p0 * (p0 / p1).ln();
        let got = distill_loss(&a, &s, &h, &[0.0, 1.0], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-9);
        let cool = distill_loss(&a, &s, &h, &[0.0, 1.0], 10.0).unwrap();
        assert!(cool < got);
        assert!(matches!(distill_loss(&a, &s, &h, &[0.0, 1.0], 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn fusion_of_identical_rows_returns_the_row() {
        let v = vec![0.3, -1.2, 2.0];
        let r = EncodedRow {
            h_cls: v.clone(),
            h_features: vec![v.clone(), v.clone()],
            feature_order: vec!["a".into(), "b".into()],
        };
        let (h, w) = knowledge_fusion(&r, &[5.0, -3.0, 1.0]).unwrap();
        assert!(max_abs(&h, &v) < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_picks_aligned_row() {
        let r = EncodedRow {
            h_cls: vec![1.0, 0.0, 0.0],
            h_features: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            feature_order: vec!["a".into(), "b".into()],
        };
        let (_, w) = knowledge_fusion(&r, &[0.0, 20.0, 0.0]).unwrap();
        assert!(w[1] > 0.99);
    }

    #[test]
    fn fusion_weights_hand_computed() {
        let r = EncodedRow {
            h_cls: vec![1.0, 0.0],
            h_features: vec![vec![0.0, 1.0], vec![1.0, 1.0]],
            feature_order: vec!["a".into(), "b".into()],
        };
        let (h, w) = knowledge_fusion(&r, &[2.0, 0.0]).unwrap();
        let s = 2.0 / 2f64.sqrt();
        let e = [s.exp(), 1.0, s.exp()];
        let z: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((w[i] - e[i] / z).abs() < 1e-12);
        }
        let expected = [(e[0] + e[2]) / z, (e[1] + e[2]) / z];
        assert!(max_abs(&h, &expected) < 1e-12);
    }

    #[test]
    fn gate_end_points_are_exact() {
        let (a, s) = setup(config(4, 4), 4);
        let h_llm = vec![0.5, -1.0, 2.0, 0.1];
        let h_cls = vec![1.0, 2.0, -3.0, 0.25];
        assert_eq!(gated_combine(&a, &s, &h_llm, &h_cls, 0.0).unwrap(), h_cls);
        let mut g = Graph::new();
        let x = g.constant(row(&h_llm));
        let gx = a.g_nodes(&mut g, &s, x).unwrap();
        assert_eq!(gated_combine(&a, &s, &h_llm, &h_cls, 1.0).unwrap(), g.value(gx).row(0).to_vec());
        let half = gated_combine(&a, &s, &h_llm, &h_cls, 0.5).unwrap();
        for i in 0..4 {
            assert!((half[i] - 0.5 * (h_llm[i] + h_cls[i])).abs() < 1e-9);
        }
        assert!(matches!(gated_combine(&a, &s, &h_llm, &h_cls, 1.1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_gate_closed_returns_cls() {
        let (a, s) = setup(AdapterConfig { eta: 0.0, ..config(8, 4) }, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = rand_row(&mut rng, 3, 8);
        for _ in 0..2 {
            let h = knowledge(rand_vec(&mut rng, 4));
            let out = adapter_forward(&a, &s, &r, &h).unwrap();
            assert_eq!(out.h_llm_hat, r.h_cls);
        }
    }

    #[test]
    fn knowledge_steers_open_gate() {
        let (a, s) = setup(AdapterConfig { eta: 1.0, ..config(8, 4) }, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = rand_row(&mut rng, 3, 8);
        let o1 = adapter_forward(&a, &s, &r, &knowledge(rand_vec(&mut rng, 4))).unwrap();
        let o2 = adapter_forward(&a, &s, &r, &knowledge(rand_vec(&mut rng, 4))).unwrap();
        assert!(max_abs(&o1.h_llm_hat, &o2.h_llm_hat) > 1e-6);
        for o in [&o1, &o2] {
            assert!(o.kl_loss >= 0.0);
            assert!(o.attention.iter().all(|&w| w >= 0.0));
            assert!((o.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_forward_matches_value_path() {
        let (a, s) = setup(config(8, 4), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<EncodedRow> = (0..3).map(|_| rand_row(&mut rng, 2, 8)).collect();
        let h = knowledge(rand_vec(&mut rng, 4));
        let mut g = Graph::new();
        let hidden = Array2::from_shape_vec(
            (9, 8),
            rows.iter().flat_map(|r| r.stacked().into_iter()).collect(),
        )
        .unwrap();
        let hidden = g.constant(hidden);
        let cls = g.gather(hidden, vec![0, 3, 6]).unwrap();
        let feats = g.gather(hidden, vec![1, 2, 4, 5, 7, 8]).unwrap();
        let hm = g.constant(row(&h.vector));
        let nodes = a
            .forward(&mut g, &s, &mut ForwardCtx::eval(), hidden, cls, feats, hm, 3, 2)
            .unwrap();
        let weights = fusion_weights(&g, nodes.h_llm).unwrap();
        for (b, r) in rows.iter().enumerate() {
            let out = adapter_forward(&a, &s, r, &h).unwrap();
            assert!(max_abs(&out.h_llm_hat, &g.value(nodes.h_llm_hat).row(b).to_vec()) < 1e-9);
            assert!((out.kl_loss - g.value(nodes.kl)[[b, 0]]).abs() < 1e-9);
            assert!(max_abs(&out.attention, &weights.row(b).to_vec()) < 1e-12);
        }
    }

    #[test]
    fn gradients_of_kl_plus_output_norm() {
        let (a, mut s) = setup(config(8, 4), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<EncodedRow> = (0..2).map(|_| rand_row(&mut rng, 3, 8)).collect();
        let h = knowledge(rand_vec(&mut rng, 4));
        let hidden = Array2::from_shape_vec(
            (8, 8),
            rows.iter().flat_map(|r| r.stacked().into_iter()).collect(),
        )
        .unwrap();
        // Perturb g away from the exact identity so its gradient is generic.
        for (name, v) in [("adapter.g.up.weight", 0.05), ("adapter.g.down.weight", -0.03)] {
            let w = s.get_mut(name).unwrap();
            w.iter_mut().enumerate().for_each(|(i, x)| *x += v * ((i % 7) as f64 - 3.0));
        }
        let run = |s: &ParameterStore, grads: bool| {
            let mut g = Graph::new();
            let hd = g.constant(hidden.clone());
            let cls = g.gather(hd, vec![0, 4]).unwrap();
            let feats = g.gather(hd, vec![1, 2, 3, 5, 6, 7]).unwrap();
            let hm = g.constant(row(&h.vector));
            let n = a.forward(&mut g, s, &mut ForwardCtx::eval(), hd, cls, feats, hm, 2, 3).unwrap();
            let kl = g.sum_all(n.kl);
            let sq = g.mul(n.h_llm_hat, n.h_llm_hat).unwrap();
            let sq = g.sum_all(sq);
            let loss = g.add(kl, sq).unwrap();
            (g.scalar(loss), grads.then(|| g.backward(loss).unwrap()))
        };
        let grads = run(&s, true).1.unwrap();
        assert!(grads.contains_key("adapter.w0"));
        let report = grad_check(&s, &grads, GradCheckOptions::default(), |p| Ok(run(p, false).0)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
