//! The single TOML run configuration shared by every pipeline command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::data::{read_rows, CsvOptions, MetadataFile, TabularDataset};
use crate::embed::{hidden_states_url, EmbeddingSpec, KnowledgeSource, KnowledgeVector, LayerSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::experiment::{ExperimentConfig, Variant, VariantName};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::sha256_hex;

pub const DEFAULT_KNOWLEDGE_FILE: &str = "knowledge.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub metadata: PathBuf,
    /// Labeled and unlabeled rows; an empty label cell marks a row unlabeled.
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Read a previously extracted vector.
    File,
    /// Query a hidden-states endpoint.
    Http,
    /// Deterministic stand-in derived from the prompt text.
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub source: SourceKind,
    /// Vector file: input for `file`, output location otherwise.
    pub path: Option<PathBuf>,
    /// Endpoint for `http`; falls back to the environment variable.
    pub url: Option<String>,
    pub model_id: String,
    pub layer: LayerSpec,
    /// Stub vector dimension and seed.
    pub dim: usize,
    pub seed: u64,
    pub retries: u32,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        KnowledgeSection {
            source: SourceKind::Stub,
            path: None,
            url: None,
            model_id: "llama-2-7b".into(),
            layer: LayerSpec::default(),
            dim: AdapterConfig::default().llm_dim,
            seed: 0,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub baseline: bool,
    /// Published cells keyed by shot, shown beside the measured ones.
    pub reference: BTreeMap<String, String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            baseline: true,
            reference: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantName>,
    /// Worker threads for the evaluation sweep; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    pub data: DataSection,
    #[serde(default)]
    pub knowledge: KnowledgeSection,
    #[serde(default)]
    pub embedding: EmbeddingSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_dataset_name() -> String {
    "dataset".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_shots() -> Vec<usize> {
    vec![4, 8, 16, 32, 64]
}

fn default_variants() -> Vec<VariantName> {
    vec![VariantName(Variant::FULL)]
}

fn default_head_hidden() -> usize {
    ModelConfig::default().head_hidden
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text)?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            head_hidden: self.head_hidden,
            sate: true,
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.variants.iter().map(|v| v.0).collect()
    }

    pub fn knowledge_path(&self) -> PathBuf {
        match &self.knowledge.path {
            Some(p) => self.resolve(p),
            None => self.output_dir().join(DEFAULT_KNOWLEDGE_FILE),
        }
    }

    pub fn knowledge_source(&self) -> Result<KnowledgeSource> {
        let k = &self.knowledge;
        Ok(match k.source {
            SourceKind::File => KnowledgeSource::File {
                path: self.knowledge_path(),
            },
            SourceKind::Stub => KnowledgeSource::Stub { dim: k.dim, seed: k.seed },
            SourceKind::Http => KnowledgeSource::Http {
                url: k.url.clone().or_else(hidden_states_url).ok_or_else(|| {
                    Error::Config(format!(
                        "knowledge source `http` needs `knowledge.url` or {}",
                        crate::embed::HIDDEN_STATES_URL_ENV
                    ))
                })?,
                model_id: k.model_id.clone(),
                retries: k.retries,
            },
        })
    }

    pub fn csv_options(&self) -> Result<CsvOptions> {
        let d = self.data.delimiter;
        if !d.is_ascii() {
            return Err(Error::Config(format!("delimiter `{d}` is not a single ASCII character")));
        }
        Ok(CsvOptions { delimiter: d as u8 })
    }

    /// Input files whose content identifies a run.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        vec![
            self.resolve(&self.data.metadata),
            self.resolve(&self.data.train),
            self.resolve(&self.data.test),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots must be non-empty and at least 1".into()));
        }
        if self.variants.is_empty() && !self.eval.baseline {
            return Err(Error::Config("no variants to run and the baseline is off".into()));
        }
        for path in self.input_paths() {
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        if self.knowledge.source == SourceKind::File && !self.knowledge_path().exists() {
            return Err(Error::MissingArtifact(self.knowledge_path()));
        }
        if self.knowledge.source == SourceKind::Stub && self.knowledge.dim != self.adapter.llm_dim {
            return Err(Error::Config(format!(
                "stub knowledge dimension {} differs from adapter.llm_dim {}",
                self.knowledge.dim, self.adapter.llm_dim
            )));
        }
        if self.embedding.dim() != self.encoder.input_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} differs from encoder.input_dim {}",
                self.embedding.dim(),
                self.encoder.input_dim
            )));
        }
        for key in self.eval.reference.keys() {
            key.parse::<usize>()
                .map_err(|_| Error::Config(format!("reference key `{key}` is not a shot count")))?;
        }
        self.csv_options()?;
        self.model_config().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Hash of every setting that affects results. The output directory is
    /// excluded so identical runs in different places agree.
    pub fn config_hash(&self) -> Result<String> {
        let mut pinned = self.clone();
        pinned.output_dir = PathBuf::new();
        pinned.threads = 0;
        Ok(sha256_hex(&serde_json::to_vec(&pinned)?))
    }

    pub fn metadata_file(&self) -> Result<MetadataFile> {
        MetadataFile::read(&self.resolve(&self.data.metadata))
    }

    pub fn load_dataset(&self) -> Result<TabularDataset> {
        let meta = self.metadata_file()?;
        let options = self.csv_options()?;
        let rows = read_rows(&self.resolve(&self.data.train), &meta, options)?;
        let (labeled, unlabeled) = rows.into_iter().partition(|s| s.label.is_some());
        let test = read_rows(&self.resolve(&self.data.test), &meta, options)?;
        if test.iter().any(|s| s.label.is_none()) {
            return Err(Error::Data("every test row needs a label".into()));
        }
        TabularDataset::new(meta.metadata(), labeled, unlabeled, test)
    }

    pub fn reference(&self) -> BTreeMap<usize, String> {
        self.eval
            .reference
            .iter()
            .filter_map(|(k, v)| k.parse().ok().map(|shot| (shot, v.clone())))
            .collect()
    }

    pub fn experiment(&self, dataset: TabularDataset, knowledge: KnowledgeVector) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig {
            dataset_name: self.dataset_name.clone(),
            dataset,
            knowledge,
            embedding: self.resolved_embedding(),
            model: self.model_config(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            seeds: self.seeds.clone(),
            shots: self.shots.clone(),
            variants: self.variants(),
            baseline: self.eval.baseline,
            reference: self.reference(),
            threads: self.threads,
            checkpoint_dir: None,
            config_hash: self.config_hash()?,
        })
    }

    pub fn resolved_embedding(&self) -> EmbeddingSpec {
        match &self.embedding {
            EmbeddingSpec::File { path, provider_id, dim } => EmbeddingSpec::File {
                path: self.resolve(path),
                provider_id: provider_id.clone(),
                dim: *dim,
            },
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthKind, SynthOptions};

    const MINIMAL: &str = r#"
        [data]
        metadata = "metadata.toml"
        train = "train.csv"
        test = "test.csv"
    "#;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = RunConfig::parse(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.encoder.model_dim, 128);
        assert_eq!(c.encoder.ffn_dim, 256);
        assert_eq!(c.encoder.heads, 8);
        assert_eq!(c.adapter.heads, 2);
        assert_eq!((c.encoder.layers, c.adapter.layers), (2, 2));
        assert_eq!(c.encoder.dropout, 0.1);
        assert_eq!(c.pretrain.learning_rate, 1e-4);
        assert_eq!(c.finetune.learning_rate, 1e-5);
        assert_eq!(c.knowledge.layer, LayerSpec::Index(30));
        assert_eq!(c.variants(), vec![Variant::FULL]);
        assert!(c.eval.baseline);
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
            dataset_name = "toy"
            seeds = [1]
            shots = [4, 8]
            variants = ["full", "no-meta", "no-llm-meta"]
            head_hidden = 32
            [data]
            metadata = "m.toml"
            train = "t.csv"
            test = "x.csv"
            delimiter = ";"
            [knowledge]
            source = "http"
            url = "http://localhost:1"
            layer = "last"
            [embedding]
            kind = "stub"
            dim = 16
            seed = 4
            [encoder]
            input_dim = 16
            [pretrain]
            epochs = 3
            [finetune]
            learning_rate = 1e-3
            [eval]
            baseline = false
            reference = { "4" = "86.10 ± 5.42" }
        "#;
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.variants().len(), 3);
        assert_eq!(c.knowledge.layer, LayerSpec::Last);
        assert_eq!(c.csv_options().unwrap().delimiter, b';');
        assert_eq!(c.resolve(&c.data.train), PathBuf::from("/cfg/t.csv"));
        assert_eq!(c.reference()[&4], "86.10 ± 5.42");
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.pretrain.k, 4);
        assert!(matches!(c.knowledge_source().unwrap(), KnowledgeSource::Http { .. }));
    }

    #[test]
    fn unknown_keys_and_variants_are_rejected() {
        let bad = format!("{MINIMAL}\n[knowledge]\nsorce = \"file\"\n");
        assert!(RunConfig::parse(&bad, Path::new(".")).is_err());
        let bad = format!("variants = [\"half\"]\n{MINIMAL}");
        assert!(RunConfig::parse(&bad, Path::new(".")).is_err());
    }

    #[test]
    fn validation_checks_paths_and_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::parse(MINIMAL, dir.path()).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        synth::generate(SynthKind::Blobs, SynthOptions { labeled: 5, unlabeled: 5, test: 5, seed: 0 })
            .write(dir.path())
            .unwrap();
        c.validate().unwrap();
        let mut wrong = c.clone();
        wrong.knowledge.dim = 3;
        assert!(wrong.validate().is_err());
        let mut file = c.clone();
        file.knowledge.source = SourceKind::File;
        assert!(file.validate().is_err());
        let d = c.load_dataset().unwrap();
        assert_eq!((d.labeled.len(), d.unlabeled.len(), d.test.len()), (10, 5, 5));
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::parse(MINIMAL, Path::new(".")).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.seeds = vec![7];
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }
}
