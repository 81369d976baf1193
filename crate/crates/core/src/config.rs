//! Pipeline configuration, loaded from TOML. Unknown keys are rejected and
//! every value is validated on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constraints::{ClauseOrdering, ConstraintParams};
use crate::decoder::{Combo, DecodeParams};
use crate::discriminator::TrainConfig;
use crate::entity::ExpansionParams;
use crate::filter::NliThresholds;
use crate::lexicon;
use crate::lm::RemoteLmOptions;
use crate::remote::RemoteOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    /// Line-delimited taxonomy records.
    pub taxonomy: Option<PathBuf>,
    /// `item<TAB>context<TAB>count` table for set expansion.
    pub cooccurrence: Option<PathBuf>,
    /// `token<TAB>count` corpus frequencies.
    pub frequencies: Option<PathBuf>,
    /// Training text for the n-gram backend, one sentence per line.
    pub corpus: Option<PathBuf>,
    /// One phrase per line; the bundled lists are used when unset.
    pub adjectives: Option<PathBuf>,
    pub negatives: Option<PathBuf>,
    /// `phrase<TAB>antonym` pairs for the reference NLI.
    pub antonyms: Option<PathBuf>,
    /// Labeled comparatives for discriminator training.
    pub labeled: Option<PathBuf>,
    /// A trained discriminator model; takes precedence over `labeled`.
    pub discriminator_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntityConfig {
    pub roots: Vec<String>,
    pub max_depth: usize,
    pub expansion: ExpansionParams,
    pub frequency_threshold: u64,
    pub min_class_size: usize,
    pub directed_pairs: bool,
}

impl Default for EntityConfig {
    fn default() -> Self {
        EntityConfig {
            roots: Vec::new(),
            max_depth: 2,
            expansion: ExpansionParams::default(),
            frequency_threshold: 100,
            min_class_size: 2,
            directed_pairs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub drop_fraction: f64,
    /// Length-penalty exponent of the prompt perplexity.
    pub alpha: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { drop_fraction: 0.30, alpha: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmBackend {
    Ngram,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub backend: LmBackend,
    pub order: usize,
    pub smoothing_k: f64,
    pub remote: Option<RemoteLmOptions>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { backend: LmBackend::Ngram, order: 3, smoothing_k: 0.1, remote: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub decode: DecodeParams,
    pub constraints: ConstraintParams,
    pub ordering: ClauseOrdering,
    /// (aux verb, adverb) passes run per prompt.
    pub combos: Vec<(String, String)>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            decode: DecodeParams::default(),
            constraints: ConstraintParams::default(),
            ordering: ClauseOrdering::default(),
            combos: lexicon::default_combos(),
        }
    }
}

impl GenerationConfig {
    pub fn combos(&self) -> Vec<Combo> {
        self.combos.iter().map(|(a, b)| Combo::new(a, b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliBackend {
    Antonym,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Maximum average `1 - cosine` distance for merging clusters.
    pub dedup_threshold: f64,
    pub nli: NliThresholds,
    pub nli_backend: NliBackend,
    pub nli_remote: Option<RemoteOptions>,
    pub topk: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            dedup_threshold: 0.3,
            nli: NliThresholds::default(),
            nli_backend: NliBackend::Antonym,
            nli_remote: None,
            topk: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerBackend {
    Logistic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub backend: ScorerBackend,
    pub remote: Option<RemoteOptions>,
    /// Fraction applied by the pipeline's final stage.
    pub keep_fraction: f64,
    /// Fractions reported by `metrics` and `discriminate --all`.
    pub keep_fractions: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            backend: ScorerBackend::Logistic,
            remote: None,
            keep_fraction: 1.0,
            keep_fractions: vec![1.0, 0.5, 0.2],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub entropy_base: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { entropy_base: 2.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub inputs: InputPaths,
    pub entities: EntityConfig,
    pub prompts: PromptConfig,
    pub lm: LmConfig,
    pub generation: GenerationConfig,
    pub filter: FilterConfig,
    pub discriminator: DiscriminatorConfig,
    pub metrics: MetricsConfig,
}

fn unit_open(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        invalid(format!("{name} must be in (0, 1], got {v}"))
    }
}

impl PipelineConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(src).map_err(|e| ConfigError::Parse { path: "<string>".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file, resolving relative input paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg: PipelineConfig = toml::from_str(&src)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        cfg.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.resolve(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.entities;
        if e.max_depth == 0 {
            return invalid("entities.max_depth must be at least 1");
        }
        if !(e.expansion.rho >= 0.0) {
            return invalid("entities.expansion.rho must be non-negative");
        }
        if e.min_class_size < 2 {
            return invalid("entities.min_class_size must be at least 2");
        }
        let p = &self.prompts;
        if !(0.0..1.0).contains(&p.drop_fraction) {
            return invalid(format!("prompts.drop_fraction must be in [0, 1), got {}", p.drop_fraction));
        }
        if !(p.alpha >= 0.0) {
            return invalid("prompts.alpha must be non-negative");
        }
        match self.lm.backend {
            LmBackend::Ngram => {
                if self.lm.order < 1 {
                    return invalid("lm.order must be at least 1");
                }
                if !(self.lm.smoothing_k > 0.0) {
                    return invalid("lm.smoothing_k must be positive");
                }
            }
            LmBackend::Remote if self.lm.remote.is_none() => {
                return invalid("lm.backend = \"remote\" needs an [lm.remote] table");
            }
            LmBackend::Remote => {}
        }
        let g = &self.generation;
        g.decode.validate().map_err(|m| ConfigError::Invalid(format!("generation.decode: {m}")))?;
        if !(g.constraints.lambda >= 0.0) || !(g.constraints.beta >= 1.0) {
            return invalid("generation.constraints: lambda must be >= 0 and beta >= 1");
        }
        if g.combos.is_empty() {
            return invalid("generation.combos must not be empty");
        }
        let f = &self.filter;
        if !(0.0..=2.0).contains(&f.dedup_threshold) {
            return invalid("filter.dedup_threshold must be in [0, 2]");
        }
        unit_open("filter.nli.contradiction", f.nli.contradiction)?;
        unit_open("filter.nli.entailment", f.nli.entailment)?;
        if f.nli_backend == NliBackend::Remote && f.nli_remote.is_none() {
            return invalid("filter.nli_backend = \"remote\" needs a [filter.nli_remote] table");
        }
        if f.topk == 0 {
            return invalid("filter.topk must be at least 1");
        }
        let d = &self.discriminator;
        unit_open("discriminator.keep_fraction", d.keep_fraction)?;
        for &k in &d.keep_fractions {
            unit_open("discriminator.keep_fractions", k)?;
        }
        if d.backend == ScorerBackend::Remote && d.remote.is_none() {
            return invalid("discriminator.backend = \"remote\" needs a [discriminator.remote] table");
        }
        d.train.validate().map_err(|e| ConfigError::Invalid(format!("discriminator.train: {e}")))?;
        let b = self.metrics.entropy_base;
        if !(b > 0.0) || b == 1.0 {
            return invalid("metrics.entropy_base must be positive and not 1");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl InputPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.taxonomy,
            &mut self.cooccurrence,
            &mut self.frequencies,
            &mut self.corpus,
            &mut self.adjectives,
            &mut self.negatives,
            &mut self.antonyms,
            &mut self.labeled,
            &mut self.discriminator_model,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
