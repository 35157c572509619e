use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;

use latte_core::config::{RunConfig, SourceKind};
use latte_core::embed::{extract_task_knowledge, knowledge_is_current, KnowledgeSource, KnowledgeVector, LlmCallCounter, LlmCalls};
use latte_core::eval::experiment::{
    checkpoint_path, finetune_cell, pretrained_backbone, save_checkpoint, tokenize_splits, Backbone, ExperimentConfig,
    TokenizedSplits,
};
use latte_core::eval::report::{AGGREGATE_FILE, RESULTS_FILE};
use latte_core::eval::{emit_report, regenerate_aggregate, run_experiment, Variant, VariantName};
use latte_core::manifest::RunManifest;
use latte_core::model::LatteModel;
use latte_core::nn::Checkpoint;
use latte_core::synth::{self, SynthOptions};
use latte_core::Error;

use crate::lock::OutputLock;
use crate::{ReportArgs, RunArgs, SynthArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_KNOWLEDGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_DIR: &str = "manifests";
pub const SYNTH_CONFIG: &str = "latte.toml";

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_RUNTIME, error)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::TomlDe(_) => EXIT_USAGE,
        Error::Transport { .. } => EXIT_KNOWLEDGE,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn missing(path: &Path, hint: &str) -> Failure {
    Failure::new(EXIT_MISSING, anyhow!("missing upstream artifact {}; {hint}", path.display()))
}

fn absolute(path: &Path) -> CmdResult<PathBuf> {
    std::path::absolute(path).map_err(|e| Failure::new(EXIT_USAGE, anyhow!("{}: {e}", path.display())))
}

fn load_config(args: &RunArgs) -> CmdResult<RunConfig> {
    if !args.config.exists() {
        return Err(Failure::new(
            EXIT_USAGE,
            anyhow!("config file {} not found", args.config.display()),
        ));
    }
    let mut config = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = absolute(dir)?;
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(shots) = &args.shots {
        config.shots = shots.clone();
    }
    if !args.variants.is_empty() {
        config.variants = args
            .variants
            .iter()
            .map(|v| v.parse::<Variant>().map(VariantName))
            .collect::<Result<_, _>>()?;
    }
    Ok(config)
}

fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{command}.json"))
}

fn new_manifest(command: &str, config: &RunConfig, config_file: &Path) -> CmdResult<RunManifest> {
    let mut m = RunManifest::new(command, &config.config_hash()?);
    m.seeds = config.seeds.clone();
    m.shots = config.shots.clone();
    m.variants = config.variants().iter().map(|v| v.to_string()).collect();
    m.add_input("config", config_file)?;
    let [metadata, train, test] = <[PathBuf; 3]>::try_from(config.input_paths()).expect("three input files");
    m.add_input("metadata", &metadata)?;
    m.add_input("train", &train)?;
    m.add_input("test", &test)?;
    Ok(m)
}

fn knowledge_error(e: Error) -> Failure {
    Failure::new(EXIT_KNOWLEDGE, anyhow!("knowledge source failed: {e}"))
}

pub fn extract_knowledge(args: &RunArgs) -> CmdResult {
    let config = load_config(args)?;
    let path = config.knowledge_path();
    match config.validate() {
        Err(Error::MissingArtifact(p)) if p == path => {
            return Err(Failure::new(
                EXIT_KNOWLEDGE,
                anyhow!("knowledge file {} does not exist and no endpoint is configured", p.display()),
            ))
        }
        other => other?,
    }
    let out = config.output_dir();
    let _lock = OutputLock::acquire(&out).map_err(Failure::runtime)?;
    let metadata = config.metadata_file()?.metadata();
    let layer = config.knowledge.layer;
    let source = config.knowledge_source().map_err(knowledge_error)?;
    let counter = LlmCallCounter::new();
    let previous = RunManifest::read(&manifest_path(&out, "extract-knowledge")).ok();

    let existing = match source {
        KnowledgeSource::File { .. } => None,
        _ => KnowledgeVector::read(&path)
            .ok()
            .filter(|kv| knowledge_is_current(&source, kv, &metadata, layer)),
    };
    let (kv, status, calls) = match existing {
        Some(kv) => {
            let calls = previous.and_then(|m| m.llm_calls).unwrap_or_default();
            (kv, "up to date", calls)
        }
        None => {
            let kv = extract_task_knowledge(&source, &metadata, layer, &counter).map_err(knowledge_error)?;
            let status = if config.knowledge.source == SourceKind::File {
                "read"
            } else {
                kv.write(&path)?;
                "written"
            };
            (kv, status, counter.snapshot())
        }
    };

    let mut manifest = new_manifest("extract-knowledge", &config, &args.config)?;
    manifest.add_artifact(&out, &path)?;
    manifest.llm_calls = Some(calls);
    manifest.write(&manifest_path(&out, "extract-knowledge"))?;

    println!("knowledge vector {}: {status}", path.display());
    println!("new LLM calls: {}", counter.snapshot().preprocessing);
    println!(
        "{}",
        serde_json::to_string_pretty(&kv.provenance()).map_err(Failure::runtime)?
    );
    Ok(())
}

/// The knowledge vector downstream commands read. Runs whose variants all
/// leave the language-model path off get a zero placeholder.
fn load_knowledge(config: &RunConfig) -> CmdResult<(KnowledgeVector, Option<PathBuf>)> {
    let path = config.knowledge_path();
    if config.variants().iter().all(|v| !v.llm) && !path.exists() {
        let dim = config.adapter.llm_dim;
        let placeholder = KnowledgeVector {
            model_id: "none".into(),
            layer: None,
            dim,
            template_id: String::new(),
            prompt_hash: String::new(),
            vector: vec![0.0; dim],
        };
        return Ok((placeholder, None));
    }
    match KnowledgeVector::read(&path) {
        Ok(kv) => Ok((kv, Some(path))),
        Err(Error::MissingArtifact(p)) => Err(missing(&p, "run `latte extract-knowledge` first")),
        Err(e) => Err(e.into()),
    }
}

/// Validated config, experiment settings and the run manifest shared by
/// the training commands.
struct Prepared {
    out: PathBuf,
    experiment: ExperimentConfig,
    manifest: RunManifest,
    llm_calls: LlmCalls,
}

fn prepare(args: &RunArgs, command: &str) -> CmdResult<(Prepared, OutputLock)> {
    let config = load_config(args)?;
    config.validate()?;
    let out = config.output_dir();
    let lock = OutputLock::acquire(&out).map_err(Failure::runtime)?;
    let dataset = config.load_dataset()?;
    let (kv, kv_path) = load_knowledge(&config)?;
    let mut manifest = new_manifest(command, &config, &args.config)?;
    if let Some(p) = &kv_path {
        manifest.add_input("knowledge", p)?;
    }
    let llm_calls = match RunManifest::read(&manifest_path(&out, "extract-knowledge")) {
        Ok(m) => m.llm_calls.unwrap_or_default(),
        Err(_) => LlmCalls::default(),
    };
    let mut experiment = config.experiment(dataset, kv)?;
    experiment.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
    experiment.validate()?;
    Ok((
        Prepared {
            out,
            experiment,
            manifest,
            llm_calls,
        },
        lock,
    ))
}

fn tokens_for<'a>(
    cache: &'a mut BTreeMap<bool, TokenizedSplits>,
    experiment: &ExperimentConfig,
    sate: bool,
) -> CmdResult<&'a TokenizedSplits> {
    if !cache.contains_key(&sate) {
        cache.insert(sate, tokenize_splits(experiment, sate)?);
    }
    Ok(&cache[&sate])
}

fn ckpt_path(experiment: &ExperimentConfig, variant: Variant, seed: u64, stage: &str) -> PathBuf {
    checkpoint_path(experiment, variant, seed, stage).expect("checkpoint directory is set")
}

pub fn pretrain(args: &RunArgs) -> CmdResult {
    let (mut p, _lock) = prepare(args, "pretrain")?;
    let exp = &p.experiment;
    let mut cache = BTreeMap::new();
    let mut wrote = 0;
    for &variant in &exp.variants {
        if !variant.meta {
            println!("{variant}: pretraining is disabled, skipped");
            continue;
        }
        for &seed in &exp.seeds {
            let tokens = tokens_for(&mut cache, exp, variant.sate)?;
            let backbone = pretrained_backbone(exp, variant, seed, tokens)?;
            save_checkpoint(exp, &backbone.model, variant, seed, "pretrain", None)?;
            let path = ckpt_path(exp, variant, seed, "pretrain");
            p.manifest.add_artifact(&p.out, &path)?;
            println!("{variant} seed {seed}: wrote {}", path.display());
            wrote += 1;
        }
    }
    if wrote == 0 {
        println!("nothing to pretrain");
    }
    p.manifest.write(&manifest_path(&p.out, "pretrain"))?;
    Ok(())
}

fn load_backbone(exp: &ExperimentConfig, variant: Variant, seed: u64) -> CmdResult<Backbone> {
    let path = ckpt_path(exp, variant, seed, "pretrain");
    let checkpoint = match Checkpoint::load(&path) {
        Ok(c) => c,
        Err(Error::MissingArtifact(p)) => return Err(missing(&p, "run `latte pretrain` first")),
        Err(e) => return Err(e.into()),
    };
    if checkpoint.manifest.config_hash != exp.config_hash {
        log::warn!("{} was written under a different configuration", path.display());
    }
    let model = LatteModel::from_checkpoint(&checkpoint)?;
    Ok(Backbone { model })
}

pub fn finetune(args: &RunArgs) -> CmdResult {
    let (mut p, _lock) = prepare(args, "finetune")?;
    let exp = &p.experiment;
    let mut cache = BTreeMap::new();
    for &variant in &exp.variants {
        for &seed in &exp.seeds {
            let tokens = tokens_for(&mut cache, exp, variant.sate)?;
            let backbone = if variant.meta {
                load_backbone(exp, variant, seed)?
            } else {
                pretrained_backbone(exp, variant, seed, tokens)?
            };
            for &shot in &exp.shots {
                let model = finetune_cell(exp, variant, &backbone, tokens, shot, seed)?;
                let stage = format!("finetune-shot{shot}");
                save_checkpoint(exp, &model, variant, seed, &stage, Some(shot))?;
                let path = ckpt_path(exp, variant, seed, &stage);
                p.manifest.add_artifact(&p.out, &path)?;
                println!("{variant} seed {seed} shot {shot}: wrote {}", path.display());
            }
        }
    }
    p.manifest.write(&manifest_path(&p.out, "finetune"))?;
    Ok(())
}

pub fn evaluate(args: &RunArgs) -> CmdResult {
    let (mut p, _lock) = prepare(args, "evaluate")?;
    let report = run_experiment(&p.experiment, p.llm_calls)?;
    let files = emit_report(&report, &p.out)?;
    for f in [&files.results, &files.aggregate, &files.summary] {
        p.manifest.add_artifact(&p.out, f)?;
    }
    let ckpt_dir = p.out.join(CHECKPOINT_DIR);
    if ckpt_dir.exists() {
        p.manifest.add_tree(&p.out, &ckpt_dir)?;
    }
    p.manifest.llm_calls = Some(report.llm_calls);
    p.manifest.write(&manifest_path(&p.out, "evaluate"))?;

    let aggregate = std::fs::read_to_string(&files.aggregate).map_err(Failure::runtime)?;
    print!("{aggregate}");
    let failed: Vec<_> = report.results.iter().filter(|r| r.value.is_none()).collect();
    if !failed.is_empty() {
        eprintln!("warning: {} of {} cells failed; see {}", failed.len(), report.results.len(), files.results.display());
    }
    if failed.len() == report.results.len() {
        return Err(Failure::runtime(anyhow!("every cell failed")));
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let (out, config_file) = match (&args.output_dir, &args.config) {
        (Some(dir), _) => (absolute(dir)?, None),
        (None, Some(config)) => {
            let run = RunArgs {
                config: config.clone(),
                output_dir: None,
                seeds: None,
                shots: None,
                variants: Vec::new(),
            };
            (load_config(&run)?.output_dir(), Some(config.clone()))
        }
        (None, None) => {
            return Err(Failure::new(EXIT_USAGE, anyhow!("pass --output-dir or --config")));
        }
    };
    let results = out.join(RESULTS_FILE);
    if !results.exists() {
        return Err(missing(&results, "run `latte evaluate` first"));
    }
    let _lock = OutputLock::acquire(&out).map_err(Failure::runtime)?;
    let aggregate = regenerate_aggregate(&out)?;
    let mut manifest = RunManifest::new("report", "");
    if let Some(c) = &config_file {
        manifest.add_input("config", c)?;
    }
    manifest.add_input("results", &results)?;
    manifest.add_artifact(&out, &out.join(AGGREGATE_FILE))?;
    manifest.write(&manifest_path(&out, "report"))?;
    print!("{aggregate}");
    Ok(())
}

fn synth_config(args: &SynthArgs) -> String {
    let name = match args.kind {
        crate::SynthKindArg::Blobs => "synthetic-blobs",
        crate::SynthKindArg::FeatureIdentity => "synthetic-feature-identity",
        crate::SynthKindArg::Regression => "synthetic-regression",
    };
    format!(
        r#"dataset_name = "{name}"
output_dir = "runs"
seeds = [0, 1, 2]
shots = [4, 8, 16]
variants = ["full"]

[data]
metadata = "metadata.toml"
train = "train.csv"
test = "test.csv"

[knowledge]
source = "stub"
"#
    )
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    let options = SynthOptions {
        labeled: args.labeled,
        unlabeled: args.unlabeled,
        test: args.test,
        seed: args.seed,
    };
    let data = synth::generate(args.kind.into(), options);
    let written = data.write(&args.out)?;
    let config = args.out.join(SYNTH_CONFIG);
    std::fs::write(&config, synth_config(args)).map_err(Failure::runtime)?;
    for p in [&written.metadata, &written.train, &written.test, &config] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Transport {
                url: "u".into(),
                attempts: 1,
                message: "m".into()
            }),
            EXIT_KNOWLEDGE
        );
        assert_eq!(exit_code(&Error::MissingArtifact("f".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::Numerical("nan".into())), EXIT_RUNTIME);
    }

    #[test]
    fn synth_config_parses() {
        let args = SynthArgs {
            kind: crate::SynthKindArg::Regression,
            out: PathBuf::from("x"),
            seed: 0,
            labeled: 1,
            unlabeled: 1,
            test: 1,
        };
        let config = RunConfig::parse(&synth_config(&args), Path::new(".")).unwrap();
        assert_eq!(config.dataset_name, "synthetic-regression");
        assert_eq!(config.knowledge.source, SourceKind::Stub);
    }
}
