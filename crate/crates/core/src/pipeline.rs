//! Stage orchestration with per-stage JSONL checkpoints.
//!
//! A run directory holds `stage_<name>.jsonl` for every completed stage, a
//! copy of the config, `report.json` and, while a run is active, `run.lock`.
//! Each stage reads the previous stage's checkpoint and writes its own with
//! write-then-rename, so an interrupted run leaves every earlier checkpoint
//! intact.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{LmBackend, NliBackend, PipelineConfig, ScorerBackend};
use crate::decoder::{run_pass_schedule, PassLexicons};
use crate::discriminator::{self, KnowledgeScorer, LogisticScorer, RemoteScorer};
use crate::entity::{self, ComparativePrompt, CooccurrenceTable, EntityClass, FrequencyTable};
use crate::filter::relation::statement_relation;
use crate::filter::{self, AntonymNli, FilterError, NgramEmbedder, NliProvider, RelationExtractor, RemoteNli};
use crate::lexicon;
use crate::lm::{LanguageModel, NgramModel, RemoteLm, Smoothing};
use crate::store::{self, KnowledgeRecord, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Collect,
    Prompts,
    Generate,
    Dedup,
    Group,
    Contradiction,
    Topk,
    Discriminate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Collect,
        Stage::Prompts,
        Stage::Generate,
        Stage::Dedup,
        Stage::Group,
        Stage::Contradiction,
        Stage::Topk,
        Stage::Discriminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Prompts => "prompts",
            Stage::Generate => "generate",
            Stage::Dedup => "dedup",
            Stage::Group => "group",
            Stage::Contradiction => "contradiction",
            Stage::Topk => "topk",
            Stage::Discriminate => "discriminate",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s.trim())
    }

    pub fn checkpoint_name(self) -> String {
        format!("stage_{}.jsonl", self.name())
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }
}

/// Inclusive stage interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRange {
    pub from: Stage,
    pub to: Stage,
}

impl StageRange {
    pub fn all() -> Self {
        StageRange { from: Stage::Collect, to: Stage::Discriminate }
    }

    pub fn single(stage: Stage) -> Self {
        StageRange { from: stage, to: stage }
    }

    /// Parses `name`, `from..to`, `from..` or `..to`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let stage = |t: &str, default: Stage| -> Result<Stage, String> {
            if t.trim().is_empty() {
                Ok(default)
            } else {
                Stage::parse(t).ok_or_else(|| {
                    let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                    format!("unknown stage {t:?}; expected one of {}", names.join(", "))
                })
            }
        };
        let range = match s.split_once("..") {
            Some((a, b)) => StageRange { from: stage(a, Stage::Collect)?, to: stage(b, Stage::Discriminate)? },
            None if s.trim() == "all" => StageRange::all(),
            None => StageRange::single(stage(s, Stage::Collect)?),
        };
        if range.from > range.to {
            return Err(format!("stage range {s:?} runs backwards"));
        }
        Ok(range)
    }

    pub fn stages(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().filter(move |s| (self.from..=self.to).contains(s))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("run directory {0} is locked by another run (remove run.lock if that run is gone)")]
    Locked(PathBuf),
    #[error("stage {stage} needs {path}, which does not exist; run the earlier stages first")]
    MissingCheckpoint { stage: &'static str, path: PathBuf },
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("stage {stage}: remote backend failed: {message}")]
    Remote { stage: &'static str, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub input: usize,
    pub output: usize,
    /// Survivors relative to the generated record count, for filter stages.
    pub retention: Option<f64>,
    pub seconds: f64,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub stages: Vec<StageReport>,
    /// Threshold realized by the discriminator stage, when it ran.
    pub discriminator_threshold: Option<f64>,
}

/// `root/run-<first 16 hex digits of the config hash>`.
pub fn run_dir_for(root: &Path, cfg: &PipelineConfig) -> PathBuf {
    root.join(format!("run-{}", &cfg.hash()[..16]))
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(run_dir)
            .map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", run_dir.display())))?;
        let path = run_dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(PipelineError::Config(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage: stage.name(), message }
}

fn read_input(stage: Stage, path: Option<&PathBuf>, what: &str) -> Result<fs::File, PipelineError> {
    let path = path.ok_or_else(|| PipelineError::Config(format!("stage {} needs inputs.{what}", stage.name())))?;
    fs::File::open(path).map_err(|e| PipelineError::Config(format!("inputs.{what} {}: {e}", path.display())))
}

fn phrase_list(path: Option<&PathBuf>, builtin: fn() -> Vec<String>) -> Result<Vec<String>, PipelineError> {
    match path {
        Some(p) => lexicon::read_phrase_file(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))),
        None => Ok(builtin()),
    }
}

/// Loads the configured language model.
pub fn load_lm(cfg: &PipelineConfig) -> Result<Box<dyn LanguageModel>, PipelineError> {
    match cfg.lm.backend {
        LmBackend::Ngram => {
            let path = cfg
                .inputs
                .corpus
                .as_ref()
                .ok_or_else(|| PipelineError::Config("the n-gram backend needs inputs.corpus".into()))?;
            let lm = NgramModel::train_file(path, cfg.lm.order, Smoothing { k: cfg.lm.smoothing_k })
                .map_err(|e| PipelineError::Config(format!("training on {}: {e}", path.display())))?;
            Ok(Box::new(lm))
        }
        LmBackend::Remote => {
            let opts = cfg.lm.remote.clone().ok_or_else(|| PipelineError::Config("missing [lm.remote]".into()))?;
            let lm = RemoteLm::connect(opts)
                .map_err(|e| PipelineError::Remote { stage: "connect", message: e.to_string() })?;
            Ok(Box::new(lm))
        }
    }
}

pub fn load_nli(cfg: &PipelineConfig) -> Result<Box<dyn NliProvider>, PipelineError> {
    match cfg.filter.nli_backend {
        NliBackend::Antonym => {
            let adjectives = phrase_list(cfg.inputs.adjectives.as_ref(), lexicon::comparative_adjectives)?;
            let antonyms = match &cfg.inputs.antonyms {
                Some(p) => {
                    let src = fs::read_to_string(p)
                        .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                    lexicon::parse_pairs(&src).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
                }
                None => lexicon::default_antonyms(),
            };
            Ok(Box::new(AntonymNli::new(&adjectives, &antonyms)))
        }
        NliBackend::Remote => {
            let opts = cfg.filter.nli_remote.clone().ok_or_else(|| PipelineError::Config("missing [filter.nli_remote]".into()))?;
            Ok(Box::new(RemoteNli::new(opts)))
        }
    }
}

/// Trains the reference discriminator on `inputs.labeled`.
pub fn train_scorer(cfg: &PipelineConfig) -> Result<(LogisticScorer, discriminator::TrainReport), PipelineError> {
    let path = cfg
        .inputs
        .labeled
        .as_ref()
        .ok_or_else(|| PipelineError::Config("training needs inputs.labeled".into()))?;
    let src = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let data = discriminator::read_labeled(&src)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    discriminator::train(&data, &cfg.discriminator.train, cfg.seed).map_err(|e| PipelineError::Stage {
        stage: Stage::Discriminate.name(),
        message: format!("training failed: {e}"),
    })
}

/// The configured scorer: a saved model, a model trained now from labeled
/// data, or a remote endpoint.
pub fn load_scorer(cfg: &PipelineConfig) -> Result<Box<dyn KnowledgeScorer>, PipelineError> {
    match cfg.discriminator.backend {
        ScorerBackend::Remote => {
            let opts = cfg.discriminator.remote.clone().ok_or_else(|| PipelineError::Config("missing [discriminator.remote]".into()))?;
            Ok(Box::new(RemoteScorer::new(opts)))
        }
        ScorerBackend::Logistic => {
            if let Some(p) = &cfg.inputs.discriminator_model {
                let src = fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                let model = LogisticScorer::from_json(&src)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                return Ok(Box::new(model));
            }
            if cfg.inputs.labeled.is_none() {
                return Err(PipelineError::Config(
                    "the discriminate stage needs inputs.discriminator_model or inputs.labeled".into(),
                ));
            }
            Ok(Box::new(train_scorer(cfg)?.0))
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    run_dir: PathBuf,
    lm: Option<Box<dyn LanguageModel>>,
}

struct StageOutput {
    count: usize,
    diagnostics: Vec<String>,
    input: usize,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, run_dir: PathBuf) -> Self {
        Pipeline { cfg, run_dir, lm: None }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.checkpoint_name())
    }

    fn lm(&mut self) -> Result<&dyn LanguageModel, PipelineError> {
        if self.lm.is_none() {
            self.lm = Some(load_lm(&self.cfg)?);
        }
        Ok(self.lm.as_deref().unwrap())
    }

    fn input<T: for<'de> Deserialize<'de>>(&self, stage: Stage) -> Result<Vec<T>, PipelineError> {
        let prev = stage.previous().expect("the first stage has no input checkpoint");
        let path = self.checkpoint(prev);
        if !path.exists() {
            return Err(PipelineError::MissingCheckpoint { stage: stage.name(), path });
        }
        Ok(store::read_jsonl(&path)?)
    }

    fn write<T: Serialize>(&self, stage: Stage, rows: &[T]) -> Result<usize, PipelineError> {
        Ok(store::write_jsonl_atomic(rows, &self.checkpoint(stage))?)
    }

    /// Runs `range` in order and writes `report.json`. The first stage of
    /// the range must have its input checkpoint in the run directory.
    pub fn run(&mut self, range: StageRange) -> Result<RunReport, PipelineError> {
        let _lock = RunLock::acquire(&self.run_dir)?;
        fs::write(self.run_dir.join("config.toml"), self.cfg.to_toml())
            .map_err(|e| PipelineError::Config(format!("writing config copy: {e}")))?;
        if let Some(prev) = range.from.previous() {
            let path = self.checkpoint(prev);
            if !path.exists() {
                return Err(PipelineError::MissingCheckpoint { stage: range.from.name(), path });
            }
        }
        let mut report = RunReport {
            config_hash: self.cfg.hash(),
            run_dir: self.run_dir.clone(),
            stages: Vec::new(),
            discriminator_threshold: None,
        };
        for stage in range.stages() {
            log::info!("stage {} starting", stage.name());
            let t0 = Instant::now();
            let out = match stage {
                Stage::Collect => self.collect()?,
                Stage::Prompts => self.prompts()?,
                Stage::Generate => self.generate()?,
                Stage::Discriminate => {
                    let (out, threshold) = self.discriminate()?;
                    report.discriminator_threshold = threshold;
                    out
                }
                _ => self.filter_stage(stage)?,
            };
            let seconds = t0.elapsed().as_secs_f64();
            let generated = self.generated_count();
            let retention = (stage > Stage::Generate)
                .then_some(generated)
                .flatten()
                .filter(|&g| g > 0)
                .map(|g| out.count as f64 / g as f64);
            log::info!("stage {} done: {} -> {} in {seconds:.3}s", stage.name(), out.input, out.count);
            report.stages.push(StageReport {
                stage,
                input: out.input,
                output: out.count,
                retention,
                seconds,
                diagnostics: out.diagnostics,
            });
            write_report(&self.run_dir, &report)?;
        }
        Ok(report)
    }

    fn generated_count(&self) -> Option<usize> {
        let path = self.checkpoint(Stage::Generate);
        let f = fs::File::open(path).ok()?;
        use std::io::BufRead;
        Some(BufReader::new(f).lines().map_while(Result::ok).filter(|l| !l.trim().is_empty()).count())
    }

    fn collect(&mut self) -> Result<StageOutput, PipelineError> {
        let st = Stage::Collect;
        let cfg = &self.cfg;
        let e = &cfg.entities;
        let file = read_input(st, cfg.inputs.taxonomy.as_ref(), "taxonomy")?;
        let records = entity::read_taxonomy(BufReader::new(file)).map_err(|e| stage_err(st)(e.to_string()))?;
        let mut classes = entity::load_taxonomy(&records, &e.roots, e.max_depth)
            .map_err(|err| PipelineError::Config(err.to_string()))?;
        let input: usize = classes.iter().map(|c| c.entities.len()).sum();
        let mut diagnostics = Vec::new();
        if let Some(path) = &cfg.inputs.cooccurrence {
            let f = read_input(st, Some(path), "cooccurrence")?;
            let table = CooccurrenceTable::parse(BufReader::new(f)).map_err(|e| stage_err(st)(e.to_string()))?;
            classes = classes.iter().map(|c| entity::expand_class(c, &table, e.expansion)).collect();
        }
        match &cfg.inputs.frequencies {
            Some(path) => {
                let f = read_input(st, Some(path), "frequencies")?;
                let table = FrequencyTable::parse(BufReader::new(f)).map_err(|e| stage_err(st)(e.to_string()))?;
                classes = classes
                    .iter()
                    .map(|c| entity::filter_by_frequency(c, &table, e.frequency_threshold))
                    .collect();
            }
            None => diagnostics.push("no inputs.frequencies; frequency filter skipped".to_string()),
        }
        let before = classes.len();
        let classes: Vec<EntityClass> = entity::drop_small_classes(classes, e.min_class_size);
        if classes.len() < before {
            diagnostics.push(format!("{} classes below {} entities dropped", before - classes.len(), e.min_class_size));
        }
        if classes.is_empty() {
            return Err(stage_err(st)("no class survived filtering".into()));
        }
        let count = classes.iter().map(|c| c.entities.len()).sum();
        self.write(st, &classes)?;
        Ok(StageOutput { count, diagnostics, input })
    }

    fn prompts(&mut self) -> Result<StageOutput, PipelineError> {
        let st = Stage::Prompts;
        let classes: Vec<EntityClass> = self.input(st)?;
        let directed = self.cfg.entities.directed_pairs;
        let mut prompts = Vec::new();
        for c in &classes {
            for pair in entity::enumerate_pairs(c, directed).map_err(|e| stage_err(st)(e.to_string()))? {
                prompts.push(entity::render_prompt(&pair).map_err(|e| stage_err(st)(e.to_string()))?);
            }
        }
        let (drop, alpha) = (self.cfg.prompts.drop_fraction, self.cfg.prompts.alpha);
        let remote = self.cfg.lm.backend == LmBackend::Remote;
        let lm = self.lm()?;
        let kept = entity::perplexity_filter(&prompts, lm, drop, alpha).map_err(|e| {
            let message = e.to_string();
            if remote {
                PipelineError::Remote { stage: st.name(), message }
            } else {
                PipelineError::Stage { stage: st.name(), message }
            }
        })?;
        self.write(st, &kept)?;
        Ok(StageOutput { count: kept.len(), diagnostics: vec![], input: prompts.len() })
    }

    fn generate(&mut self) -> Result<StageOutput, PipelineError> {
        let st = Stage::Generate;
        let prompts: Vec<ComparativePrompt> = self.input(st)?;
        let adjectives = phrase_list(self.cfg.inputs.adjectives.as_ref(), lexicon::comparative_adjectives)?;
        let negatives = phrase_list(self.cfg.inputs.negatives.as_ref(), lexicon::negative_phrases)?;
        let g = self.cfg.generation.clone();
        let remote = self.cfg.lm.backend == LmBackend::Remote;
        let extractor = RelationExtractor::new(&adjectives);
        let lexicons = PassLexicons {
            negatives,
            adjectives,
            ordering: g.ordering.clone(),
            constraint_params: g.constraints,
        };
        let combos = g.combos();
        let lm = self.lm()?;
        let source = lm.name();
        let schedules: Vec<_> = prompts
            .par_iter()
            .map(|p| run_pass_schedule(lm, p, &combos, &lexicons, &g.decode))
            .collect();

        let mut diagnostics = Vec::new();
        let (mut failed, total) = (0usize, prompts.len() * combos.len());
        let mut records = Vec::new();
        for (p, s) in prompts.iter().zip(&schedules) {
            failed += s.failures.len();
            for f in &s.failures {
                diagnostics.push(format!("{}: pass {}/{} failed: {}", p.text, f.combo.aux, f.combo.adverb, f.message));
            }
            for (combo, d) in &s.diagnostics {
                diagnostics.push(format!("{}: pass {}/{}: {d}", p.text, combo.aux, combo.adverb));
            }
            for gen in &s.records {
                let relation = statement_relation(&extractor, &gen.text, &gen.pair.entity_a, &gen.pair.entity_b)
                    .unwrap_or_else(|| gen.adjective.clone());
                records.push(KnowledgeRecord::from_generation(records.len() as u64, gen, relation, &source));
            }
        }
        if total > 0 && failed == total {
            let message = format!("all {total} decoding passes failed");
            return Err(if remote {
                PipelineError::Remote { stage: st.name(), message }
            } else {
                PipelineError::Stage { stage: st.name(), message }
            });
        }
        self.write(st, &records)?;
        Ok(StageOutput { count: records.len(), diagnostics, input: prompts.len() })
    }

    fn filter_stage(&mut self, stage: Stage) -> Result<StageOutput, PipelineError> {
        let records: Vec<KnowledgeRecord> = self.input(stage)?;
        let f = &self.cfg.filter;
        let result = match stage {
            Stage::Dedup => filter::dedup(&records, &NgramEmbedder::default(), f.dedup_threshold)
                .map_err(|e| stage_err(stage)(e.to_string()))?,
            Stage::Group => filter::group_select(&records),
            Stage::Contradiction => {
                let nli = load_nli(&self.cfg)?;
                filter::contradiction_filter(&records, nli.as_ref(), &f.nli)
            }
            Stage::Topk => filter::topk_per_pair(&records, f.topk),
            _ => unreachable!("not a filter stage"),
        };
        self.write(stage, &result.kept)?;
        Ok(StageOutput { count: result.kept.len(), diagnostics: result.diagnostics, input: records.len() })
    }

    fn discriminate(&mut self) -> Result<(StageOutput, Option<f64>), PipelineError> {
        let st = Stage::Discriminate;
        let records: Vec<KnowledgeRecord> = self.input(st)?;
        let scorer = load_scorer(&self.cfg)?;
        let remote = self.cfg.discriminator.backend == ScorerBackend::Remote;
        let out = filter::discriminator_filter(&records, scorer.as_ref(), self.cfg.discriminator.keep_fraction)
            .map_err(|e| match e {
                FilterError::Scorer { .. } if remote => PipelineError::Remote { stage: st.name(), message: e.to_string() },
                _ => stage_err(st)(e.to_string()),
            })?;
        self.write(st, &out.kept)?;
        Ok((StageOutput { count: out.kept.len(), diagnostics: vec![], input: records.len() }, out.threshold))
    }
}

fn write_report(run_dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let path = run_dir.join("report.json");
    let tmp = run_dir.join("report.json.tmp");
    fs::write(&tmp, json + "\n")
        .and_then(|_| fs::rename(&tmp, &path))
        .map_err(|source| StoreError::Io { path: path.display().to_string(), source }.into())
}

/// Convenience wrapper: `Pipeline::new(cfg, run_dir).run(range)`.
pub fn run_pipeline(cfg: &PipelineConfig, run_dir: &Path, range: StageRange) -> Result<RunReport, PipelineError> {
    Pipeline::new(cfg.clone(), run_dir.to_path_buf()).run(range)
}
