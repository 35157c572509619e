//! Unsupervised meta-pretraining: corrupt CLS representations, cluster them
//! into pseudo-labels, sample N-way K-shot tasks and minimize
//! `kl_weight·L_KL + L_pseudo`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatteModel, RowTokens};
use crate::nn::{Adam, ForwardCtx, Gradients, Graph, ParameterStore, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec { keep_prob: 0.7, seed: 0 }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        Ok(())
    }

    /// Bernoulli(keep_prob) 0/1 mask for `draw_index`.
    pub fn mask(&self, draw_index: u64, dim: usize) -> Vec<f64> {
        if self.keep_prob >= 1.0 {
            return vec![1.0; dim];
        }
        let mut r = rng::stream(self.seed, "corruption", draw_index);
        (0..dim)
            .map(|_| if r.random::<f64>() < self.keep_prob { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn corrupt_representation(h_cls: &[f64], spec: &CorruptionSpec, draw_index: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mask = spec.mask(draw_index, h_cls.len());
    Ok(h_cls.iter().zip(mask).map(|(h, m)| h * m).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per point.
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Objective after every assignment step, ending with the final one.
    pub history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn one_hot(&self, point: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.k()];
        v[self.labels[point]] = 1.0;
        v
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (i, d) = nearest_centroid(p, centroids);
        *l = i;
        total += d;
    }
    total
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn cluster_pseudo_labels(reps: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k < 2 {
        return Err(Error::Contract(format!("k must be at least 2, got {k}")));
    }
    if reps.len() < k {
        return Err(Error::Contract(format!("{} points for {k} clusters", reps.len())));
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mut r = rng::stream(seed, "kmeans", 0);
    let mut centroids = kmeans_pp(reps, k, &mut r);
    let mut labels = vec![0; reps.len()];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let objective = assign(reps, &centroids, &mut labels);
        history.push(objective);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in reps.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            let updated = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Re-seed at the point farthest from its current centroid.
                let far = reps
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .map(|(i, p)| (i, squared_distance(p, &centroids[labels[i]])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best })
                    .0;
                taken.push(far);
                reps[far].clone()
            };
            movement = movement.max(squared_distance(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if movement <= KMEANS_TOL {
            break;
        }
    }
    let inertia = assign(reps, &centroids, &mut labels);
    history.push(inertia);
    Ok(ClusterAssignment {
        centroids,
        labels,
        inertia,
        history,
    })
}

/// An N-way K-shot task over pseudo-labelled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub n_way: usize,
    pub k_shot: usize,
    /// `(row index, pseudo-class)` pairs, grouped by class.
    pub samples: Vec<(usize, usize)>,
}

pub fn build_meta_task(assignment: &ClusterAssignment, n_way: usize, k_shot: usize, seed: u64) -> Result<MetaTask> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::TaskConstruction("N and K must be at least 1".into()));
    }
    let mut members = vec![Vec::new(); assignment.k()];
    for (i, &l) in assignment.labels.iter().enumerate() {
        members[l].push(i);
    }
    let eligible: Vec<usize> = (0..assignment.k()).filter(|&c| members[c].len() >= k_shot).collect();
    if eligible.len() < n_way {
        return Err(Error::TaskConstruction(format!(
            "{} clusters hold at least {k_shot} members, {n_way} needed",
            eligible.len()
        )));
    }
    let mut r = rng::stream(seed, "meta-task", 0);
    let chosen: Vec<usize> = eligible.choose_multiple(&mut r, n_way).copied().collect();
    let mut samples = Vec::with_capacity(n_way * k_shot);
    for c in chosen {
        for &i in members[c].choose_multiple(&mut r, k_shot) {
            samples.push((i, c));
        }
    }
    Ok(MetaTask {
        n_way,
        k_shot,
        samples,
    })
}

/// Largest `(N', K')` with `N' ≤ N`, `K' ≤ K` for which a task exists,
/// preferring to keep N.
pub fn feasible_task_shape(assignment: &ClusterAssignment, n_way: usize, k_shot: usize) -> Option<(usize, usize)> {
    let mut sizes = assignment.cluster_sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    for n in (1..=n_way.min(sizes.len())).rev() {
        let k = k_shot.min(sizes[n - 1]);
        if k >= 1 {
            return Some((n, k));
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub k: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub tasks_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub keep_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            k: 4,
            n_way: 4,
            k_shot: 5,
            tasks_per_epoch: 50,
            epochs: 5,
            learning_rate: 1e-4,
            kl_weight: 1.0,
            keep_prob: 0.7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if self.n_way == 0 || self.n_way > self.k {
            return Err(Error::Config(format!("N = {} must lie in 1..=k ({})", self.n_way, self.k)));
        }
        if self.k_shot == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        CorruptionSpec {
            keep_prob: self.keep_prob,
            seed: 0,
        }
        .validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLosses {
    pub meta: f64,
    pub kl: f64,
    pub pseudo: f64,
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub task_index: usize,
    pub l_meta: f64,
    pub l_kl: f64,
    pub l_pseudo: f64,
}

/// Builds the meta loss graph. Returns `(graph, loss, kl, pseudo)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_graph(
    model: &LatteModel,
    store: &ParameterStore,
    ctx: &mut ForwardCtx,
    rows: &[&RowTokens],
    masks: &Array2<f64>,
    pseudo_labels: &[usize],
    kl_weight: f64,
) -> Result<(Graph, Var, Var, Var)> {
    let mut g = Graph::new();
    let nodes = model
        .net
        .forward(&mut g, store, ctx, rows, &model.spec.knowledge.vector, Some(masks))?;
    let logits = model.net.pseudo_logits(&mut g, store, nodes.representation())?;
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, pseudo_labels.to_vec())?;
    let mean_logp = g.mean(picked);
    let pseudo = g.scale(mean_logp, -1.0);
    let kl = g.mean(nodes.adapter.kl);
    let weighted = g.scale(kl, kl_weight);
    let loss = g.add(weighted, pseudo)?;
    Ok((g, loss, kl, pseudo))
}

fn check_finite(losses: &MetaLosses, rows: &[usize]) -> Result<()> {
    if losses.meta.is_finite() && losses.kl.is_finite() && losses.pseudo.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical(format!(
        "non-finite meta loss {losses:?} on task rows {rows:?}"
    )))
}

/// Evaluates the meta loss of a task (and its gradients) without updating.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_meta_task(
    model: &LatteModel,
    ctx: &mut ForwardCtx,
    tokens: &[RowTokens],
    task: &MetaTask,
    masks: &Array2<f64>,
    kl_weight: f64,
    with_grads: bool,
) -> Result<(MetaLosses, Option<Gradients>)> {
    let rows: Vec<&RowTokens> = task.samples.iter().map(|&(i, _)| &tokens[i]).collect();
    let labels: Vec<usize> = task.samples.iter().map(|&(_, c)| c).collect();
    let (g, loss, kl, pseudo) = meta_loss_graph(model, &model.params, ctx, &rows, masks, &labels, kl_weight)?;
    let losses = MetaLosses {
        meta: g.scalar(loss),
        kl: g.scalar(kl),
        pseudo: g.scalar(pseudo),
    };
    let row_ids: Vec<usize> = task.samples.iter().map(|s| s.0).collect();
    check_finite(&losses, &row_ids)?;
    let grads = if with_grads { Some(g.backward(loss)?) } else { None };
    Ok((losses, grads))
}

/// One optimizer update on a task; returns the pre-update losses.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    model: &mut LatteModel,
    optimizer: &mut Adam,
    ctx: &mut ForwardCtx,
    tokens: &[RowTokens],
    task: &MetaTask,
    masks: &Array2<f64>,
    kl_weight: f64,
) -> Result<MetaLosses> {
    let (losses, grads) = evaluate_meta_task(model, ctx, tokens, task, masks, kl_weight, true)?;
    optimizer.step(&mut model.params, &grads.expect("requested"))?;
    Ok(losses)
}

/// Eval-mode CLS representations of all rows.
pub fn encode_cls(model: &LatteModel, tokens: &[RowTokens]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(tokens.len());
    for chunk in tokens.chunks(64) {
        let rows: Vec<&RowTokens> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let (tokens_var, n) = model.net.tokens(&mut g, &model.params, &rows)?;
        let h = model.net.encoder.forward(&mut g, &model.params, &mut ctx, tokens_var, rows.len(), n)?;
        let (cls, _) = model.net.encoder.split(&mut g, h, rows.len(), n)?;
        out.extend(g.value(cls).rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

pub struct PretrainOutcome {
    pub model: LatteModel,
    pub curve: Vec<LossRecord>,
}

/// Runs Stage I on the unlabeled rows. The returned model keeps the
/// pseudo-label head; fine-tuning discards it.
pub fn run_pretraining(
    mut model: LatteModel,
    tokens: &[RowTokens],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if tokens.len() < config.k {
        return Err(Error::Data(format!(
            "{} unlabeled rows for {} clusters",
            tokens.len(),
            config.k
        )));
    }
    model.attach_pseudo_head(config.k, rng::derive_seed(seed, "pseudo-head", 0));
    let mut optimizer = Adam::new(config.learning_rate);
    let corruption = CorruptionSpec {
        keep_prob: config.keep_prob,
        seed,
    };
    let dropout = model.net.config.encoder.dropout;
    let d = model.net.config.encoder.model_dim;
    let mut curve = Vec::new();
    for epoch in 0..config.epochs {
        let cls = encode_cls(&model, tokens)?;
        let masks: Vec<Vec<f64>> = (0..tokens.len())
            .map(|i| corruption.mask((epoch * tokens.len() + i) as u64, d))
            .collect();
        let corrupted: Vec<Vec<f64>> = cls
            .iter()
            .zip(&masks)
            .map(|(h, m)| h.iter().zip(m).map(|(a, b)| a * b).collect())
            .collect();
        let assignment = cluster_pseudo_labels(&corrupted, config.k, rng::derive_seed(seed, "cluster", epoch as u64))?;
        let (n_way, k_shot) = feasible_task_shape(&assignment, config.n_way, config.k_shot)
            .ok_or_else(|| Error::TaskConstruction("no cluster has members".into()))?;
        if (n_way, k_shot) != (config.n_way, config.k_shot) {
            log::warn!(
                "epoch {epoch}: clusters too small for {}-way {}-shot tasks, using {n_way}-way {k_shot}-shot",
                config.n_way,
                config.k_shot
            );
        }
        for t in 0..config.tasks_per_epoch {
            let index = (epoch * config.tasks_per_epoch + t) as u64;
            let task = build_meta_task(&assignment, n_way, k_shot, rng::derive_seed(seed, "task", index))?;
            let mut task_masks = Array2::zeros((task.samples.len(), d));
            for (b, &(i, _)) in task.samples.iter().enumerate() {
                task_masks.row_mut(b).assign(&ndarray::ArrayView1::from(&masks[i]));
            }
            let mut ctx = ForwardCtx::train(dropout, rng::stream(seed, "pretrain-dropout", index));
            let losses = meta_step(&mut model, &mut optimizer, &mut ctx, tokens, &task, &task_masks, config.kl_weight)?;
            curve.push(LossRecord {
                epoch,
                task_index: t,
                l_meta: losses.meta,
                l_kl: losses.kl,
                l_pseudo: losses.pseudo,
            });
        }
        log::debug!(
            "pretrain epoch {epoch}: mean L_meta {:.5}",
            epoch_mean(&curve, epoch).unwrap_or(f64::NAN)
        );
    }
    Ok(PretrainOutcome { model, curve })
}

pub fn epoch_mean(curve: &[LossRecord], epoch: usize) -> Option<f64> {
    let v: Vec<f64> = curve.iter().filter(|r| r.epoch == epoch).map(|r| r.l_meta).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes the loss curve as CSV with full-precision values.
pub fn write_loss_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in curve {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
