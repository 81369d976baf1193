use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use compkb::config::{ConfigError, LmBackend, NliBackend, PipelineConfig, ScorerBackend};
use compkb::filter::{self, RelationExtractor};
use compkb::lexicon;
use compkb::metrics::{self, DimensionLexicon};
use compkb::pipeline::{self, Pipeline, PipelineError, Stage, StageRange};
use compkb::store::{self, FilterStage, KnowledgeRecord, RecordQuery};

#[derive(Parser)]
#[command(name = "compkb", version, about = "Build and inspect a comparative knowledge base")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which run directories are created, one per config hash.
    #[arg(long, global = true, default_value = "runs")]
    run_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the taxonomy, expand and filter entity classes.
    CollectEntities,
    /// Pair entities, render prompts and drop the least fluent ones.
    BuildPrompts,
    /// Run constrained decoding over every prompt.
    Generate,
    /// Run dedup, group selection, contradiction filtering and top-k.
    Filter,
    /// Score records with the discriminator and keep the configured fraction.
    Discriminate,
    /// Run a range of stages, e.g. `all`, `generate..topk`, `dedup..`.
    Run {
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Train the reference discriminator on `inputs.labeled`.
    TrainDiscriminator {
        /// Where to write the model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Diversity and agreement metrics over a stage's records.
    Metrics {
        #[arg(long)]
        stage: Option<String>,
        /// Gold triples, `entity_a<TAB>entity_b<TAB>dimension<TAB>direction`.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Dimension lexicon, `adjective<TAB>dimension<TAB>polarity`.
        #[arg(long)]
        dimensions: Option<PathBuf>,
    },
    /// Print matching records as JSON lines.
    Query {
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        entity: Option<String>,
        #[arg(long = "class")]
        class_id: Option<String>,
        #[arg(long)]
        relation: Option<String>,
        /// Only records carrying this stage flag.
        #[arg(long)]
        flag: Option<String>,
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Write records as multiple-choice questions (JSON lines).
    ExportQa {
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that the configured remote backends answer.
    ServeCheck,
}

enum Failure {
    Config(String),
    Stage(String),
    Remote(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Stage(_) => 3,
            Failure::Remote(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Stage(m) | Failure::Remote(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            PipelineError::Remote { .. } => Failure::Remote(e.to_string()),
            _ => Failure::Stage(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Stage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_stage(s: &str) -> Result<Stage> {
    Stage::parse(s).ok_or_else(|| Failure::Config(format!("unknown stage {s:?}")))
}

/// The named stage's checkpoint, or the latest record checkpoint present.
fn records_for(run_dir: &Path, stage: Option<&str>) -> Result<(Stage, Vec<KnowledgeRecord>)> {
    let stage = match stage {
        Some(s) => parse_stage(s)?,
        None => Stage::ALL
            .into_iter()
            .rev()
            .filter(|&s| s >= Stage::Generate)
            .find(|s| run_dir.join(s.checkpoint_name()).exists())
            .ok_or_else(|| Failure::Stage(format!("no record checkpoints in {}", run_dir.display())))?,
    };
    if stage < Stage::Generate {
        return Err(Failure::Config(format!("stage {} does not hold knowledge records", stage.name())));
    }
    let path = run_dir.join(stage.checkpoint_name());
    if !path.exists() {
        return Err(Failure::Stage(format!("{} does not exist", path.display())));
    }
    let records = store::load(&path).map_err(|e| Failure::Stage(format!("{}: {e}", path.display())))?;
    Ok((stage, records))
}

fn run_stages(cfg: PipelineConfig, run_dir: PathBuf, range: StageRange) -> Result<()> {
    let report = Pipeline::new(cfg, run_dir).run(range)?;
    for s in &report.stages {
        let retention = s.retention.map(|r| format!(" retention {:.1}%", 100.0 * r)).unwrap_or_default();
        eprintln!("{:<13} {:>7} -> {:<7}{retention} [{:.2}s]", s.stage.name(), s.input, s.output, s.seconds);
        for d in s.diagnostics.iter().take(5) {
            log::warn!("{}: {d}", s.stage.name());
        }
        if s.diagnostics.len() > 5 {
            log::warn!("{}: {} more diagnostics in report.json", s.stage.name(), s.diagnostics.len() - 5);
        }
    }
    println!("{}", report.run_dir.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    Ok(())
}

fn serve_check(cfg: &PipelineConfig) -> Result<()> {
    let mut checked = 0;
    if cfg.lm.backend == LmBackend::Remote {
        let lm = pipeline::load_lm(cfg)?;
        lm.next_logprobs(&[]).map_err(|e| Failure::Remote(format!("language model: {e}")))?;
        eprintln!("language model ok ({} tokens)", lm.vocab().len());
        checked += 1;
    }
    if cfg.filter.nli_backend == NliBackend::Remote {
        let nli = pipeline::load_nli(cfg)?;
        let probe = "Compared to cars, trucks are heavier.";
        nli.classify(probe, probe).map_err(|e| Failure::Remote(format!("NLI: {e}")))?;
        eprintln!("NLI ok");
        checked += 1;
    }
    if cfg.discriminator.backend == ScorerBackend::Remote {
        let scorer = pipeline::load_scorer(cfg)?;
        scorer
            .score("Compared to cars, trucks are heavier.")
            .map_err(|e| Failure::Remote(format!("discriminator: {e}")))?;
        eprintln!("discriminator ok");
        checked += 1;
    }
    if checked == 0 {
        eprintln!("no remote backends configured");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    }
    let run_dir = pipeline::run_dir_for(&cli.global.run_dir, &cfg);
    let stages = |from, to| StageRange { from, to };
    match cli.command {
        Command::CollectEntities => run_stages(cfg, run_dir, StageRange::single(Stage::Collect)),
        Command::BuildPrompts => run_stages(cfg, run_dir, StageRange::single(Stage::Prompts)),
        Command::Generate => run_stages(cfg, run_dir, StageRange::single(Stage::Generate)),
        Command::Filter => run_stages(cfg, run_dir, stages(Stage::Dedup, Stage::Topk)),
        Command::Discriminate => run_stages(cfg, run_dir, StageRange::single(Stage::Discriminate)),
        Command::Run { stages } => {
            let range = StageRange::parse(&stages).map_err(Failure::Config)?;
            run_stages(cfg, run_dir, range)
        }
        Command::TrainDiscriminator { out } => {
            let (model, report) = pipeline::train_scorer(&cfg)?;
            let json = model.to_json().map_err(|e| Failure::Stage(e.to_string()))?;
            store_atomic(&out, json.as_bytes())?;
            print_json(&report)
        }
        Command::Metrics { stage, gold, dimensions } => {
            let (_, records) = records_for(&run_dir, stage.as_deref())?;
            let lexicon = match &dimensions {
                Some(p) => DimensionLexicon::parse(&read_text(p)?).map_err(|e| Failure::Config(e.to_string()))?,
                None => DimensionLexicon::builtin(),
            };
            let gold = match &gold {
                Some(p) => Some(metrics::parse_gold(&read_text(p)?).map_err(|e| Failure::Config(e.to_string()))?),
                None => None,
            };
            let report = metrics::summarize(&records, cfg.metrics.entropy_base, gold.as_deref().map(|g| (g, &lexicon)))
                .map_err(|e| Failure::Stage(e.to_string()))?;
            let kept: Vec<(f64, usize)> =
                cfg.discriminator.keep_fractions.iter().map(|&f| (f, filter::keep_count(f, records.len()))).collect();
            print_json(&serde_json::json!({ "summary": report, "keep_counts": kept }))
        }
        Command::Query { stage, entity, class_id, relation, flag, min_score } => {
            let (_, records) = records_for(&run_dir, stage.as_deref())?;
            let stage = match flag {
                Some(f) => Some(FilterStage::parse(&f).ok_or_else(|| Failure::Config(format!("unknown flag {f:?}")))?),
                None => None,
            };
            let q = RecordQuery { entity, class_id, relation, stage, min_discriminator_score: min_score };
            let out = io::stdout();
            let mut out = out.lock();
            store::write_records(&store::query(&records, &q), &mut out)?;
            out.flush()?;
            Ok(())
        }
        Command::ExportQa { stage, out } => {
            let (_, records) = records_for(&run_dir, stage.as_deref())?;
            let adjectives = match &cfg.inputs.adjectives {
                Some(p) => lexicon::read_phrase_file(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
                None => lexicon::comparative_adjectives(),
            };
            let extractor = RelationExtractor::new(&adjectives);
            let mut buf = Vec::new();
            let mut skipped = 0;
            for r in &records {
                match metrics::qa_transform(r, &extractor) {
                    Ok(item) => {
                        serde_json::to_writer(&mut buf, &item).expect("serializable");
                        buf.push(b'\n');
                    }
                    Err(e) => {
                        skipped += 1;
                        log::debug!("{e}");
                    }
                }
            }
            if skipped > 0 {
                log::warn!("{skipped} records are not templated statements and were skipped");
            }
            match out {
                Some(path) => store_atomic(&path, &buf),
                None => Ok(io::stdout().write_all(&buf)?),
            }
        }
        Command::ServeCheck => serve_check(&cfg),
    }
}

fn store_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
