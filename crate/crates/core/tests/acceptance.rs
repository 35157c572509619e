//! Acceptance suite. Runs as a plain binary (`harness = false`) so every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use latte_core::adapter::{
    distill_loss, gated_combine, knowledge_fusion, project_knowledge, Adapter, AdapterConfig,
};
use latte_core::data::TabularDataset;
use latte_core::embed::{
    extract_task_knowledge, EmbeddingSpec, KnowledgeSource, KnowledgeVector, LayerSpec, LlmCallCounter,
};
use latte_core::encoder::{encode_row, EncodedRow, Encoder, EncoderConfig};
use latte_core::eval::experiment::{run_experiment, ExperimentConfig, Variant};
use latte_core::eval::report::{emit_report, read_summary, ExperimentReport, MetricResult};
use latte_core::eval::{auc, Metric};
use latte_core::finetune::{finetune_loss_graph, FinetuneConfig, Targets};
use latte_core::model::{HeadKind, LatteModel, ModelConfig, ModelSpec, RowTokens};
use latte_core::nn::{grad_check, FeedForward, ForwardCtx, GradCheckOptions, Graph, ParameterStore};
use latte_core::pretrain::{cluster_pseudo_labels, PretrainConfig};
use latte_core::synth::{self, SynthKind, SynthOptions, REGRESSION_NOISE};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// Permutation invariance of the CLS representation.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let encoder = Encoder::new(EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::default()
    })
    .unwrap();
    let mut store = ParameterStore::new();
    encoder.init(&mut store, 2024);
    let d_in = encoder.config.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(5..=12);
        let row: Vec<(String, Vec<f64>)> = (0..n).map(|j| (format!("f{j}"), gaussian_vec(&mut rng, d_in))).collect();
        let base = encode_row(&encoder, &store, &row).unwrap().h_cls;
        for _ in 0..10 {
            let mut permuted = row.clone();
            permuted.shuffle(&mut rng);
            let h = encode_row(&encoder, &store, &permuted).unwrap().h_cls;
            for (a, b) in base.iter().zip(&h) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(60),
        format!("max |Δh_cls| = {worst:.3e} over 1000 permutations in {elapsed:.1?}"),
    )
}

fn perturb(store: &mut ParameterStore, name: &str, scale: f64) {
    store
        .get_mut(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v += scale * ((i as f64) * 0.77).sin());
}

fn stub_knowledge(dataset: &TabularDataset, dim: usize) -> KnowledgeVector {
    extract_task_knowledge(
        &KnowledgeSource::Stub { dim, seed: 0 },
        &dataset.metadata,
        LayerSpec::default(),
        &LlmCallCounter::new(),
    )
    .unwrap()
}

// Gradients of the three training losses against central differences.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let options = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // (a) encoder + classification head, cross-entropy.
    let config = EncoderConfig {
        input_dim: 6,
        model_dim: 8,
        ffn_dim: 12,
        layers: 2,
        heads: 2,
        dropout: 0.0,
    };
    let encoder = Encoder::new(config).unwrap();
    let head = FeedForward::new("head", 8, 6, 3);
    let mut store = ParameterStore::new();
    encoder.init(&mut store, 3);
    head.init(&mut store, 3);
    let (batch, n) = (3, 4);
    let tokens = Array2::from_shape_vec((batch * n, 6), gaussian_vec(&mut rng, batch * n * 6)).unwrap();
    let labels = vec![0, 2, 1];
    let run_a = |s: &ParameterStore, grads: bool| {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let h = encoder.forward(&mut g, s, &mut ForwardCtx::eval(), t, batch, n).unwrap();
        let (cls, _) = encoder.split(&mut g, h, batch, n).unwrap();
        let logits = head.forward(&mut g, s, cls).unwrap();
        let lp = g.log_softmax(logits);
        let picked = g.pick(lp, labels.clone()).unwrap();
        let m = g.mean(picked);
        let loss = g.scale(m, -1.0);
        (g.scalar(loss), grads.then(|| g.backward(loss).unwrap()))
    };
    let grads = run_a(&store, true).1.unwrap();
    let a = grad_check(&store, &grads, options, |p| Ok(run_a(p, false).0)).unwrap();

    // (b) adapter: KL distillation plus the squared norm of its output.
    let adapter = Adapter::new(AdapterConfig {
        model_dim: 8,
        ffn_dim: 12,
        llm_dim: 5,
        dropout: 0.0,
        ..AdapterConfig::default()
    })
    .unwrap();
    let mut store = ParameterStore::new();
    adapter.init(&mut store, 4);
    perturb(&mut store, "adapter.g.up.weight", 0.05);
    perturb(&mut store, "adapter.g.down.weight", 0.05);
    let (batch, n) = (2, 3);
    let hidden = Array2::from_shape_vec((batch * (n + 1), 8), gaussian_vec(&mut rng, batch * (n + 1) * 8)).unwrap();
    let h_m = Array2::from_shape_vec((1, 5), gaussian_vec(&mut rng, 5)).unwrap();
    let run_b = |s: &ParameterStore, grads: bool| {
        let mut g = Graph::new();
        let hd = g.constant(hidden.clone());
        let cls = g.gather(hd, vec![0, 4]).unwrap();
        let feats = g.gather(hd, vec![1, 2, 3, 5, 6, 7]).unwrap();
        let hm = g.constant(h_m.clone());
        let nodes = adapter
            .forward(&mut g, s, &mut ForwardCtx::eval(), hd, cls, feats, hm, batch, n)
            .unwrap();
        let kl = g.sum_all(nodes.kl);
        let sq = g.mul(nodes.h_llm_hat, nodes.h_llm_hat).unwrap();
        let sq = g.sum_all(sq);
        let loss = g.add(kl, sq).unwrap();
        (g.scalar(loss), grads.then(|| g.backward(loss).unwrap()))
    };
    let grads = run_b(&store, true).1.unwrap();
    let b = grad_check(&store, &grads, options, |p| Ok(run_b(p, false).0)).unwrap();

    // (c) the full fine-tuning loss of the assembled model.
    let data = synth::generate(
        SynthKind::Blobs,
        SynthOptions {
            labeled: 3,
            unlabeled: 4,
            test: 2,
            seed: 3,
        },
    );
    let dataset = data.dataset().unwrap();
    let spec = ModelSpec {
        config: ModelConfig {
            encoder: EncoderConfig {
                input_dim: 6,
                model_dim: 8,
                ffn_dim: 12,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            adapter: AdapterConfig {
                layers: 1,
                model_dim: 8,
                ffn_dim: 12,
                llm_dim: 5,
                dropout: 0.0,
                ..AdapterConfig::default()
            },
            head_hidden: 6,
            sate: true,
        },
        metadata: dataset.metadata.clone(),
        norm_stats: dataset.norm_stats.clone(),
        embedding: EmbeddingSpec::Stub { dim: 6, seed: 1 },
        knowledge: stub_knowledge(&dataset, 5),
        task_head: None,
        pseudo_classes: None,
    };
    let mut model = LatteModel::new(spec, 5).unwrap();
    model.attach_task_head(5, 0.0);
    perturb(&mut model.params, "head.task.down.weight", 0.3);
    perturb(&mut model.params, "adapter.g.up.weight", 0.05);
    let provider = model.spec.embedding.provider().unwrap();
    let tokens = model.tokenize(provider.as_ref(), &dataset.labeled).unwrap();
    let rows: Vec<&RowTokens> = tokens.iter().collect();
    let kind = HeadKind::for_metadata(&dataset.metadata);
    let targets = Targets::from_samples(&dataset.labeled, kind, &dataset.norm_stats).unwrap();
    let run_c = |s: &ParameterStore, grads: bool| {
        let (g, loss, _, _) = finetune_loss_graph(&model, s, &mut ForwardCtx::eval(), &rows, &targets, 1.0).unwrap();
        (g.scalar(loss), grads.then(|| g.backward(loss).unwrap()))
    };
    let grads = run_c(&model.params, true).1.unwrap();
    let c = grad_check(&model.params, &grads, options, |p| Ok(run_c(p, false).0)).unwrap();

    let elapsed = start.elapsed();
    let worst = a.max_rel_error.max(b.max_rel_error).max(c.max_rel_error);
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "max rel error: encoder+CE {:.2e}, adapter {:.2e}, fine-tune loss {:.2e} ({} coords) in {elapsed:.1?}",
            a.max_rel_error,
            b.max_rel_error,
            c.max_rel_error,
            a.coords_checked + b.coords_checked + c.coords_checked
        ),
    )
}

fn random_encoded(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EncodedRow {
    EncodedRow {
        h_cls: gaussian_vec(rng, d).iter().map(|v| 3.0 * v).collect(),
        h_features: (0..n).map(|_| gaussian_vec(rng, d).iter().map(|v| 3.0 * v).collect()).collect(),
        feature_order: (0..n).map(|j| format!("f{j}")).collect(),
    }
}

// Attention normalization, KL properties and the η = 0 gate.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let row = random_encoded(&mut rng, n, d);
        let q: Vec<f64> = gaussian_vec(&mut rng, d).iter().map(|v| 5.0 * v).collect();
        let (_, weights) = knowledge_fusion(&row, &q).unwrap();
        worst_sum = worst_sum.max((weights.iter().sum::<f64>() - 1.0).abs());
    }
    let adapter = Adapter::new(AdapterConfig {
        model_dim: d,
        llm_dim: 8,
        ffn_dim: 32,
        ..AdapterConfig::default()
    })
    .unwrap();
    let mut store = ParameterStore::new();
    adapter.init(&mut store, 4);
    let knowledge = |v: Vec<f64>| KnowledgeVector {
        model_id: "test".into(),
        layer: Some(30),
        dim: v.len(),
        template_id: "t".into(),
        prompt_hash: String::new(),
        vector: v,
    };
    let mut min_kl = f64::INFINITY;
    let mut max_self_kl: f64 = 0.0;
    for _ in 0..1000 {
        let h = knowledge(gaussian_vec(&mut rng, 8).iter().map(|v| 4.0 * v).collect());
        let q: Vec<f64> = gaussian_vec(&mut rng, d).iter().map(|v| 4.0 * v).collect();
        min_kl = min_kl.min(distill_loss(&adapter, &store, &h, &q, 4.0).unwrap());
        let own = project_knowledge(&adapter, &store, &h).unwrap();
        max_self_kl = max_self_kl.max(distill_loss(&adapter, &store, &h, &own, 4.0).unwrap());
    }
    let mut gate_exact = true;
    for _ in 0..1000 {
        let h_llm: Vec<f64> = gaussian_vec(&mut rng, d);
        let h_cls: Vec<f64> = gaussian_vec(&mut rng, d);
        let out = gated_combine(&adapter, &store, &h_llm, &h_cls, 0.0).unwrap();
        gate_exact &= out.iter().zip(&h_cls).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(
        worst_sum < 1e-6 && min_kl >= 0.0 && max_self_kl <= 1e-12 && gate_exact,
        format!(
            "max |Σw - 1| = {worst_sum:.2e}; min KL = {min_kl:.3e}; max KL at q = W0·h = {max_self_kl:.2e}; η = 0 bitwise: {gate_exact}"
        ),
    )
}

// Lloyd objective monotone, final labels at the nearest final centroid.
fn criterion_5() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let points = rng.random_range(30..200);
        let dim = rng.random_range(2..12);
        let k = rng.random_range(2..7);
        let centers: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, dim).iter().map(|v| 4.0 * v).collect()).collect();
        let reps: Vec<Vec<f64>> = (0..points)
            .map(|i| centers[i % k].iter().map(|c| c + rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = cluster_pseudo_labels(&reps, k, seed).unwrap();
        let monotone = a.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        let mut nearest_ok = true;
        for (i, p) in reps.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in a.centroids.iter().enumerate() {
                let d: f64 = p.iter().zip(centroid).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            nearest_ok &= a.labels[i] == best.0;
        }
        let one_hot = (0..points).all(|i| {
            let v = a.one_hot(i);
            v.len() == k && v.iter().filter(|&&x| x == 1.0).count() == 1 && v.iter().all(|&x| x == 0.0 || x == 1.0)
        });
        if !(monotone && nearest_ok && one_hot) {
            failures.push(format!("seed {seed}: monotone {monotone}, nearest {nearest_ok}, one-hot {one_hot}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "20 datasets: objective non-increasing, labels match brute force, pseudo-labels one-hot".into()
        } else {
            failures.join("; ")
        },
    )
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                credit += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=100);
        let levels = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        if auc(&scores, &labels).unwrap() != brute_force_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches out of 500 random sets"))
}

/// The acceptance runs use the reference architecture with a stub
/// knowledge vector and stub feature embeddings.
fn experiment(dataset: TabularDataset, name: &str) -> ExperimentConfig {
    let model = ModelConfig::default();
    let knowledge = stub_knowledge(&dataset, model.adapter.llm_dim);
    ExperimentConfig {
        dataset_name: name.into(),
        dataset,
        knowledge,
        embedding: EmbeddingSpec::default(),
        model,
        pretrain: PretrainConfig::default(),
        finetune: FinetuneConfig::default(),
        seeds: vec![0, 1, 2],
        shots: vec![4],
        variants: vec![Variant::FULL],
        baseline: false,
        reference: BTreeMap::new(),
        threads: 0,
        checkpoint_dir: None,
        config_hash: "acceptance".into(),
    }
}

fn values(report: &ExperimentReport, variant: &str, shot: usize) -> Vec<Option<f64>> {
    report
        .results
        .iter()
        .filter(|r| r.variant == variant && r.shot == shot)
        .map(|r| r.value)
        .collect()
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let ok: Vec<f64> = v.iter().flatten().copied().collect();
    (ok.len() == v.len() && !v.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

fn per_seed_table(results: &[MetricResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "{}/shot{}/seed{}={}",
                r.variant,
                r.shot,
                r.seed,
                r.value.map_or_else(|| format!("ERR({})", r.error.clone().unwrap_or_default()), |v| format!("{v:.4}"))
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

// Few-shot learning signal on separable blobs.
fn criterion_7() -> Outcome {
    let start = Instant::now();
    let data = synth::generate(SynthKind::Blobs, SynthOptions::default());
    let mut config = experiment(data.dataset().unwrap(), "blobs");
    config.shots = vec![4, 8, 16];
    let report = run_experiment(&config, Default::default()).unwrap();
    let means: Vec<Option<f64>> = config.shots.iter().map(|&s| mean(&values(&report, "full", s))).collect();
    let elapsed = start.elapsed();
    let Some(m4) = means[0] else {
        return outcome(false, format!("failed cells: {}", per_seed_table(&report.results)));
    };
    let trend = means.windows(2).all(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => b >= a - 0.02,
        _ => false,
    });
    outcome(
        m4 >= 0.90 && trend && elapsed < Duration::from_secs(600),
        format!(
            "mean AUC by shot 4/8/16: {} in {elapsed:.1?} [{}]",
            means
                .iter()
                .map(|m| m.map_or("failed".into(), |v| format!("{v:.4}")))
                .collect::<Vec<_>>()
                .join(" / "),
            per_seed_table(&report.results)
        ),
    )
}

// Ablation direction on the feature-identity dataset.
fn criterion_8() -> Outcome {
    let data = synth::generate(SynthKind::FeatureIdentity, SynthOptions::default());
    let mut config = experiment(data.dataset().unwrap(), "identity");
    config.seeds = (0..5).collect();
    let sate_off = Variant {
        sate: false,
        ..Variant::FULL
    };
    let meta_off = Variant {
        meta: false,
        ..Variant::FULL
    };
    config.variants = vec![Variant::FULL, sate_off, meta_off];
    let report = run_experiment(&config, Default::default()).unwrap();
    let full = mean(&values(&report, "full", 4));
    let no_sate = mean(&values(&report, &sate_off.to_string(), 4));
    let no_meta = mean(&values(&report, &meta_off.to_string(), 4));
    let table = per_seed_table(&report.results);
    match (full, no_sate, no_meta) {
        (Some(f), Some(s), Some(m)) => outcome(
            f - s >= 0.03 && f >= m - 0.02,
            format!("mean AUC full {f:.4}, SaTE-off {s:.4} (margin {:.4}), Meta-off {m:.4} [{table}]", f - s),
        ),
        _ => outcome(false, format!("failed cells [{table}]")),
    }
}

// Regression path against the noise floor and a ridge baseline.
fn criterion_9() -> Outcome {
    let data = synth::generate(SynthKind::LinearRegression, SynthOptions::default());
    let mut config = experiment(data.dataset().unwrap(), "linear");
    config.shots = vec![16];
    config.baseline = true;
    let report = run_experiment(&config, Default::default()).unwrap();
    assert!(report.results.iter().all(|r| r.metric == Metric::Mse));
    let latte = mean(&values(&report, "full", 16));
    let linear = mean(&values(&report, "linear", 16));
    let bound = 2.5 * REGRESSION_NOISE * REGRESSION_NOISE;
    let table = per_seed_table(&report.results);
    match (latte, linear) {
        (Some(l), Some(b)) => outcome(
            l <= bound && l <= 1.1 * b,
            format!("mean MSE {l:.5} (bound {bound:.5}), ridge baseline {b:.5} (1.1x = {:.5}) [{table}]", 1.1 * b),
        ),
        _ => outcome(false, format!("failed cells [{table}]")),
    }
}

fn small_experiment(dataset: TabularDataset, knowledge: KnowledgeVector) -> ExperimentConfig {
    let mut config = experiment(dataset, "blobs");
    config.knowledge = knowledge;
    config.model.adapter.llm_dim = config.knowledge.dim;
    config.pretrain.epochs = 2;
    config.pretrain.tasks_per_epoch = 5;
    config.finetune.epochs = 10;
    config.seeds = vec![0, 1];
    config.shots = vec![4, 8];
    config.variants = vec![Variant::FULL, Variant { meta: false, ..Variant::FULL }];
    config.baseline = true;
    config
}

// LLM call accounting with a mock hidden-states endpoint.
fn criterion_10() -> Outcome {
    let server = common::MockServer::start(32, 0);
    let data = synth::generate(
        SynthKind::Blobs,
        SynthOptions {
            labeled: 20,
            unlabeled: 60,
            test: 40,
            seed: 10,
        },
    );
    let dataset = data.dataset().unwrap();
    let counter = LlmCallCounter::new();
    let knowledge = extract_task_knowledge(
        &KnowledgeSource::Http {
            url: server.url.clone(),
            model_id: "mock".into(),
            retries: 0,
        },
        &dataset.metadata,
        LayerSpec::default(),
        &counter,
    )
    .unwrap();
    let config = small_experiment(dataset, knowledge);
    let report = run_experiment(&config, counter.snapshot()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path()).unwrap();
    let calls = read_summary(&files.summary).unwrap().llm_call_summary;
    let ok = (calls.preprocessing, calls.training, calls.inference) == (1, 0, 0) && server.requests() == 1;
    outcome(
        ok,
        format!(
            "llm_call_summary preprocessing={} training={} inference={}; endpoint saw {} request(s)",
            calls.preprocessing,
            calls.training,
            calls.inference,
            server.requests()
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

// Two identical runs give byte-identical results and checkpoints.
fn criterion_11() -> Outcome {
    let data = synth::generate(
        SynthKind::Blobs,
        SynthOptions {
            labeled: 20,
            unlabeled: 60,
            test: 40,
            seed: 11,
        },
    );
    let run = |dir: &Path| {
        let dataset = data.dataset().unwrap();
        let knowledge = stub_knowledge(&dataset, 64);
        let mut config = small_experiment(dataset, knowledge);
        config.checkpoint_dir = Some(dir.join("checkpoints"));
        let report = run_experiment(&config, Default::default()).unwrap();
        emit_report(&report, &dir.join("report")).unwrap();
        files_under(dir)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (run(a.path()), run(b.path()));
    let checkpoints = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    outcome(
        differing.is_empty() && fa.len() == fb.len() && checkpoints > 0 && fa.contains_key("report/results.csv"),
        if differing.is_empty() {
            format!("{} files byte-identical, {checkpoints} checkpoints", fa.len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (2, "permutation invariance", criterion_2),
        (3, "gradient correctness", criterion_3),
        (4, "adapter algebra", criterion_4),
        (5, "clustering contract", criterion_5),
        (6, "AUC oracle equivalence", criterion_6),
        (7, "few-shot learning signal", criterion_7),
        (8, "ablation direction", criterion_8),
        (9, "regression path", criterion_9),
        (10, "LLM-call accounting", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let label = format!("criterion {id}");
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {label} ({name}): {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
