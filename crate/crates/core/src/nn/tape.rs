//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as named leaves; [`Graph::backward`] returns their gradients. Only the
//! operations the model needs are provided; attention and layer norm are fused
//! with hand-derived backward passes.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::ParameterStore;
use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    LogSoftmax(Var),
    RowSum(Var),
    SumAll(Var),
    Mean(Var),
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        weights: Vec<f64>,
    },
}

/// Block layout of a batched attention call: `batch` independent groups,
/// each with `q_len` query rows and `kv_len` key/value rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Tensor {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var)[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers (once) and returns the leaf for a named parameter.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.dot(bv);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `a + row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape_err("add_row", av, rv));
        }
        let out = av + rv;
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.needs(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.needs(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.needs(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// m×n → m×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(&[a]);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Picks `a[i, cols[i]]` for every row, giving m×1.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if cols.len() != av.nrows() || cols.iter().any(|&c| c >= av.ncols()) {
            return Err(Error::Shape(format!(
                "pick: {} indices for {:?}",
                cols.len(),
                av.shape()
            )));
        }
        let out = Array2::from_shape_fn((cols.len(), 1), |(i, _)| av[[i, cols[i]]]);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Pick(a, cols), ng))
    }

    /// Row gather; indices may repeat (broadcast) and gradients scatter-add.
    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if rows.iter().any(|&r| r >= av.nrows()) {
            return Err(Error::Shape(format!(
                "gather: index out of range for {:?}",
                av.shape()
            )));
        }
        let out = av.select(Axis(0), &rows);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Gather(a, rows), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise layer normalization with gain and bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.ncols();
        if self.value(gamma).dim() != (1, n) || self.value(beta).dim() != (1, n) {
            return Err(shape_err("layer_norm", xv, self.value(gamma)));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Batched multi-head scaled dot-product attention. Queries are
    /// `(batch·q_len)×d`, keys `(batch·kv_len)×d`, values `(batch·kv_len)×dv`;
    /// each head uses `1/sqrt(d/heads)` scaling.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dv = vv.ncols();
        let AttentionSpec {
            heads,
            batch,
            q_len,
            kv_len,
        } = spec;
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: dims {d}/{dv} not divisible by {heads} heads"
            )));
        }
        if kv.ncols() != d
            || qv.nrows() != batch * q_len
            || kv.nrows() != batch * kv_len
            || vv.nrows() != batch * kv_len
            || kv_len == 0
        {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?} for {spec:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((batch * q_len, dv));
        let mut weights = Vec::with_capacity(batch * heads * q_len * kv_len);
        for b in 0..batch {
            let (qr, kr) = (b * q_len..(b + 1) * q_len, b * kv_len..(b + 1) * kv_len);
            for h in 0..heads {
                let qh = qv.slice(s![qr.clone(), h * dh..(h + 1) * dh]);
                let kh = kv.slice(s![kr.clone(), h * dh..(h + 1) * dh]);
                let vh = vv.slice(s![kr.clone(), h * dvh..(h + 1) * dvh]);
                let scores = qh.dot(&kh.t()) * scale;
                let a = softmax_rows(scores.view());
                out.slice_mut(s![qr.clone(), h * dvh..(h + 1) * dvh])
                    .assign(&a.dot(&vh));
                weights.extend(a.iter().copied());
            }
        }
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            },
            ng,
        ))
    }

    /// Attention weights of an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, var: Var) -> Option<(&[f64], AttentionSpec)> {
        match &self.nodes[var.0].op {
            Op::Attention { weights, spec, .. } => Some((weights, *spec)),
            _ => None,
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Array2::zeros(self.value(*var).raw_dim()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::LogSoftmax(a) => {
                // dx = g - softmax * rowsum(g)
                let sums = g.sum_axis(Axis(1));
                let mut d = node.value.mapv(f64::exp);
                for (mut row, s) in d.rows_mut().into_iter().zip(sums.iter()) {
                    row.mapv_inplace(|p| -p * s);
                }
                d += g;
                acc(*a, d);
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).raw_dim();
                let d = Array2::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                acc(*a, d);
            }
            Op::SumAll(a) => {
                acc(*a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                acc(*a, Array2::from_elem(av.raw_dim(), g[[0, 0]] / av.len() as f64));
            }
            Op::Pick(a, cols) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                for (i, &c) in cols.iter().enumerate() {
                    d[[i, c]] = g[[i, 0]];
                }
                acc(*a, d);
            }
            Op::Gather(a, rows) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut target = d.row_mut(r);
                    target += &g.row(i);
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    acc(p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * gv;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    Zip::from(dx.rows_mut())
                        .and(dxhat.rows())
                        .and(xhat.rows())
                        .and(inv_std.as_slice())
                        .for_each(|mut out, dh, xh, &inv| {
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &xv| {
                                *o = inv / n * (n * d - sum_dh - xv * sum_dh_xh);
                            });
                        });
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (d, dv) = (qv.ncols(), vv.ncols());
                let (dh, dvh) = (d / spec.heads, dv / spec.heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dvv = Array2::zeros(vv.raw_dim());
                let block = spec.q_len * spec.kv_len;
                for b in 0..spec.batch {
                    let qr = b * spec.q_len..(b + 1) * spec.q_len;
                    let kr = b * spec.kv_len..(b + 1) * spec.kv_len;
                    for h in 0..spec.heads {
                        let offset = (b * spec.heads + h) * block;
                        let a = ArrayView2::from_shape(
                            (spec.q_len, spec.kv_len),
                            &weights[offset..offset + block],
                        )
                        .expect("attention weight block");
                        let (hc, hv) = (h * dh..(h + 1) * dh, h * dvh..(h + 1) * dvh);
                        let go = g.slice(s![qr.clone(), hv.clone()]);
                        let vh = vv.slice(s![kr.clone(), hv.clone()]);
                        dvv.slice_mut(s![kr.clone(), hv.clone()])
                            .assign(&a.t().dot(&go));
                        let da = go.dot(&vh.t());
                        let mut ds = &a * &da;
                        let row_dots = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut())
                            .and(a.rows())
                            .and(&row_dots)
                            .for_each(|mut row, arow, &dot| {
                                Zip::from(&mut row).and(&arow).for_each(|x, &p| *x -= p * dot);
                            });
                        ds *= scale;
                        let qh = qv.slice(s![qr.clone(), hc.clone()]);
                        let kh = kv.slice(s![kr.clone(), hc.clone()]);
                        dq.slice_mut(s![qr.clone(), hc.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![kr.clone(), hc.clone()])
                            .assign(&ds.t().dot(&qh));
                    }
                }
                // q, k, v may alias the same node; accumulate each.
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dvv);
            }
        }
    }
}
