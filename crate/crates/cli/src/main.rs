mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowrag_core::evaluation::{self, render_csv, render_markdown, EvalReport};
use flowrag_core::features::{
    ingest_csv, read_records_jsonl, write_records_jsonl, ColumnMap, FeatureVector, FlowFeatures,
    FlowRecord, IngestOptions, Standardizer,
};
use flowrag_core::gbdt::{self, GbdtModel, GbdtParams};
use flowrag_core::kb::{build_kb, KnowledgeBase, LoadOptions};
use flowrag_core::label::ClassLabel;
use flowrag_core::llm::{LlmClient, ModelRef};
use flowrag_core::mlp::{self, MlpConfig, MlpModel};
use flowrag_core::pipeline::{write_report, Detector, Prediction, Resources};

use config::RunConfig;

#[derive(Parser)]
#[command(
    version,
    about = "Two-stage IoT DDoS flow detector with retrieval-augmented prompting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a flow CSV, write feature records and a fitted standardizer
    Extract(ExtractArgs),
    /// Train the gradient-boosted classifier or the embedding network
    #[command(subcommand)]
    Train(TrainCommand),
    /// Build a knowledge base of labeled exemplars
    BuildKb(BuildKbArgs),
    /// Classify flows with one configured detector
    Detect(DetectArgs),
    /// Run every configured detector over a stratified sample and tabulate
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    /// Feature records (JSON Lines)
    #[arg(long)]
    out: PathBuf,
    /// Where to write the fitted standardizer
    #[arg(long)]
    standardizer: PathBuf,
    /// Take the column map and label aliases from this run config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Expect columns named after the feature fields
    #[arg(long, conflicts_with = "config")]
    canonical_columns: bool,
    /// Fail when the label column is absent
    #[arg(long)]
    require_label: bool,
}

#[derive(Subcommand)]
enum TrainCommand {
    Gbdt(TrainGbdtArgs),
    Mlp(TrainMlpArgs),
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    standardizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGbdtArgs {
    #[command(flatten)]
    data: TrainData,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    min_child_weight: Option<f64>,
}

#[derive(Args)]
struct TrainMlpArgs {
    #[command(flatten)]
    data: TrainData,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildKbArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    standardizer: PathBuf,
    /// Classifier used to attach probability signatures
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fill rationales with the built-in rule oracle
    #[arg(long, conflicts_with = "teacher_endpoint")]
    teacher_oracle: bool,
    /// Generation server used as teacher
    #[arg(long, requires = "teacher_model")]
    teacher_endpoint: Option<String>,
    #[arg(long)]
    teacher_model: Option<String>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Flow records (JSON Lines); labels are ignored
    #[arg(long)]
    flows: PathBuf,
    /// Report (JSON Lines); standard output when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detector name; defaults to the first in the config
    #[arg(long)]
    detector: Option<String>,
    /// Include the full prompt in each report line
    #[arg(long)]
    emit_prompts: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Labeled flow records; overrides `data` in the config
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Evaluate on generated rule-consistent flows instead of a data file
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Receives results.json, results.md and results.csv
    #[arg(long)]
    out_dir: PathBuf,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
enum Status {
    Clean,
    ErrorsRecorded,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract(a) => cmd_extract(&a),
        Command::Train(TrainCommand::Gbdt(a)) => cmd_train_gbdt(&a),
        Command::Train(TrainCommand::Mlp(a)) => cmd_train_mlp(&a),
        Command::BuildKb(a) => cmd_build_kb(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    };
    match result {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::ErrorsRecorded) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_records(path: &Path) -> Result<Vec<FlowRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_records_jsonl(f).with_context(|| format!("reading {}", path.display()))
}

fn labeled(records: &[FlowRecord]) -> Result<Vec<(FlowFeatures, ClassLabel)>> {
    records
        .iter()
        .map(|r| match r.label {
            Some(l) => Ok((r.features, l)),
            None => bail!("record from row {} has no label", r.row),
        })
        .collect()
}

fn standardized(
    data: &[(FlowFeatures, ClassLabel)],
    s: &Standardizer,
) -> Vec<(FeatureVector, ClassLabel)> {
    data.iter().map(|(f, l)| (s.apply(f), *l)).collect()
}

fn load_standardizer(path: &Path) -> Result<Standardizer> {
    Standardizer::load(path).with_context(|| format!("loading standardizer {}", path.display()))
}

fn cmd_extract(a: &ExtractArgs) -> Result<Status> {
    let mut opts = IngestOptions {
        require_label: a.require_label,
        ..IngestOptions::default()
    };
    if a.canonical_columns {
        opts.columns = ColumnMap::canonical();
    }
    if let Some(path) = &a.config {
        let cfg = RunConfig::load(path)?;
        if let Some(cols) = cfg.columns.clone() {
            opts.columns = cols;
        }
        opts.labels = cfg.label_map()?;
    }
    let ingested =
        ingest_csv(&a.input, &opts).with_context(|| format!("ingesting {}", a.input.display()))?;
    for e in &ingested.errors {
        log::warn!("row {}: {}", e.row, e.message);
    }
    let standardizer = Standardizer::fit(ingested.records.iter().map(|r| &r.features))
        .context("fitting standardizer")?;
    let mut w = create(&a.out)?;
    write_records_jsonl(&mut w, &ingested.records)?;
    standardizer.save(&a.standardizer)?;
    println!(
        "rows: {} accepted, {} rejected",
        ingested.records.len(),
        ingested.errors.len()
    );
    Ok(if ingested.errors.is_empty() {
        Status::Clean
    } else {
        Status::ErrorsRecorded
    })
}

fn cmd_train_gbdt(a: &TrainGbdtArgs) -> Result<Status> {
    let defaults = GbdtParams::default();
    let params = GbdtParams {
        max_depth: a.max_depth.unwrap_or(defaults.max_depth),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        rounds: a.rounds.unwrap_or(defaults.rounds),
        gamma: a.gamma.unwrap_or(defaults.gamma),
        lambda: a.lambda.unwrap_or(defaults.lambda),
        min_child_weight: a.min_child_weight.unwrap_or(defaults.min_child_weight),
    };
    let s = load_standardizer(&a.data.standardizer)?;
    let data = standardized(&labeled(&read_records(&a.data.features)?)?, &s);
    let (model, losses) = gbdt::train_traced(&data, &params)?;
    model.save(&a.data.out)?;
    let correct = data
        .iter()
        .filter(|(x, y)| model.predict_label(x).ok() == Some(*y))
        .count();
    println!(
        "gbdt: {} rounds, training log-loss {:.6}, training accuracy {:.4}",
        model.rounds(),
        losses.last().copied().unwrap_or(f64::NAN),
        correct as f64 / data.len() as f64
    );
    Ok(Status::Clean)
}

fn cmd_train_mlp(a: &TrainMlpArgs) -> Result<Status> {
    let d = MlpConfig::default();
    let cfg = MlpConfig {
        h1: a.hidden.unwrap_or(d.h1),
        epochs_max: a.epochs.unwrap_or(d.epochs_max),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        patience: a.patience.unwrap_or(d.patience),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let s = load_standardizer(&a.data.standardizer)?;
    let data = standardized(&labeled(&read_records(&a.data.features)?)?, &s);
    let (model, summary) = mlp::train_mlp(&data, &cfg)?;
    model.save(&a.data.out)?;
    println!(
        "mlp: {} epochs, best epoch {}, validation loss {:.6}, validation accuracy {:.4}",
        summary.epochs_run,
        summary.best_epoch,
        summary.best_validation_loss,
        summary.validation_accuracy
    );
    Ok(Status::Clean)
}

fn cmd_build_kb(a: &BuildKbArgs) -> Result<Status> {
    let s = load_standardizer(&a.standardizer)?;
    let data = labeled(&read_records(&a.features)?)?;
    let model = a
        .model
        .as_ref()
        .map(|p| GbdtModel::load(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()?;
    let teacher = if a.teacher_oracle {
        Some(LlmClient::new(ModelRef::rule_oracle()))
    } else if let (Some(endpoint), Some(name)) = (&a.teacher_endpoint, &a.teacher_model) {
        Some(LlmClient::new(ModelRef::remote(
            name.as_str(),
            endpoint.as_str(),
        )))
    } else {
        None
    };
    let (kb, stats) = build_kb(&data, &s, model.as_ref(), teacher.as_ref(), a.workers)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    kb.save(&a.out)?;
    println!(
        "kb: {} exemplars, signatures {}, teacher calls {}, teacher failures {}",
        kb.len(),
        if kb.has_signatures() { "yes" } else { "no" },
        stats.teacher_calls,
        stats.teacher_failures
    );
    Ok(if stats.teacher_failures == 0 {
        Status::Clean
    } else {
        Status::ErrorsRecorded
    })
}

/// Artifacts named by a run config, loaded once per command.
struct Loaded {
    standardizer: Standardizer,
    gbdt: Option<GbdtModel>,
    kb: Option<KnowledgeBase>,
    embedder: Option<MlpModel>,
}

impl Loaded {
    /// Without a configured standardizer one is fitted on `fallback`.
    fn from_config(cfg: &RunConfig, fallback: &[FlowFeatures]) -> Result<Self> {
        let standardizer = match &cfg.standardizer {
            Some(p) => load_standardizer(p)?,
            None => {
                log::info!(
                    "no standardizer configured; fitting on {} flows",
                    fallback.len()
                );
                Standardizer::fit(fallback)?
            }
        };
        let gbdt = cfg
            .gbdt
            .as_ref()
            .map(|p| GbdtModel::load(p).with_context(|| format!("loading model {}", p.display())))
            .transpose()?;
        let embedder = cfg
            .embedder
            .as_ref()
            .map(|p| MlpModel::load(p).with_context(|| format!("loading embedder {}", p.display())))
            .transpose()?;
        let kb = match &cfg.kb {
            Some(p) => {
                let opts = LoadOptions {
                    expect_standardizer: Some(standardizer.fingerprint()),
                    expect_model: gbdt.as_ref().map(GbdtModel::fingerprint),
                    strict: cfg.strict_fingerprints,
                };
                let (mut kb, _) = KnowledgeBase::load(p, &opts)
                    .with_context(|| format!("loading knowledge base {}", p.display()))?;
                if let Some(csv) = &cfg.custom_embeddings {
                    kb = kb.import_embeddings(csv)?;
                } else if let Some(m) = &embedder {
                    let rows = kb
                        .exemplars()
                        .iter()
                        .map(|e| m.embed(&e.features_std).map(|v| v.to_vec()))
                        .collect::<Result<Vec<_>, _>>()?;
                    kb = kb.with_custom_embeddings(rows)?;
                }
                Some(kb)
            }
            None => None,
        };
        Ok(Loaded {
            standardizer,
            gbdt,
            kb,
            embedder,
        })
    }

    fn resources(&self) -> Resources<'_> {
        let mut r = Resources::new(&self.standardizer);
        if let Some(m) = &self.gbdt {
            r = r.with_gbdt(m);
        }
        if let Some(kb) = &self.kb {
            r = r.with_kb(kb);
        }
        if let Some(e) = &self.embedder {
            r = r.with_embedder(e);
        }
        r
    }
}

fn cmd_detect(a: &DetectArgs) -> Result<Status> {
    let cfg = RunConfig::load(&a.config)?;
    let detectors = cfg.detectors()?;
    let det_cfg = match &a.detector {
        Some(name) => detectors
            .into_iter()
            .find(|d| &d.name == name)
            .with_context(|| format!("no detector named {name:?}"))?,
        None => detectors
            .into_iter()
            .next()
            .context("config defines no detector")?,
    };
    let flows: Vec<FlowFeatures> = read_records(&a.flows)?
        .into_iter()
        .map(|r| r.features)
        .collect();
    if flows.is_empty() {
        bail!("{} holds no flows", a.flows.display());
    }
    let loaded = Loaded::from_config(&cfg, &flows)?;
    let detector = Detector::new(det_cfg, loaded.resources())?;
    let results = detector.detect_batch(&flows);

    match &a.out {
        Some(p) => write_report(create(p)?, &results, a.emit_prompts)?,
        None => write_report(std::io::stdout().lock(), &results, a.emit_prompts)?,
    }
    let errors = results.iter().filter(|r| r.error.is_some()).count();
    let failures = results
        .iter()
        .filter(|r| r.predicted == Prediction::ParseFailure)
        .count();
    for r in results.iter().filter(|r| r.error.is_some()) {
        log::error!(
            "flow {}: {}",
            r.flow_id,
            r.error.as_deref().unwrap_or_default()
        );
    }
    log::info!(
        "{}: {} flows, {} parse failures, {} errors",
        detector.config().name,
        results.len(),
        failures,
        errors
    );
    Ok(if errors == 0 {
        Status::Clean
    } else {
        Status::ErrorsRecorded
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Status> {
    let cfg = RunConfig::load(&a.config)?;
    let grid = cfg.detectors()?;
    if grid.is_empty() {
        bail!("config defines no detector");
    }
    let per_class = a.per_class.unwrap_or(cfg.per_class);
    let seed = a.seed.unwrap_or(cfg.seed);
    let data = if a.synthetic {
        evaluation::synthetic_flows(per_class, seed)
    } else {
        let path = a
            .data
            .as_ref()
            .or(cfg.data.as_ref())
            .context("no data file configured; pass --data or --synthetic")?;
        labeled(&read_records(path)?)?
    };
    let flows: Vec<FlowFeatures> = data.iter().map(|(f, _)| *f).collect();
    let loaded = Loaded::from_config(&cfg, &flows)?;
    let experiment = evaluation::run_experiment(&grid, &data, per_class, seed, loaded.resources())?;

    let reports: Vec<EvalReport> = experiment
        .outcomes
        .iter()
        .filter_map(|o| o.report.clone())
        .collect();
    std::fs::create_dir_all(&a.out_dir)?;
    let mut w = create(&a.out_dir.join("results.json"))?;
    serde_json::to_writer_pretty(&mut w, &experiment)?;
    writeln!(w)?;
    w.flush()?;
    let markdown = render_markdown(&reports);
    std::fs::write(a.out_dir.join("results.md"), &markdown)?;
    std::fs::write(a.out_dir.join("results.csv"), render_csv(&reports))?;
    print!("{markdown}");

    let mut errors = 0;
    for o in &experiment.outcomes {
        if let Some(e) = &o.error {
            log::error!("{}: {e}", o.name);
            errors += 1;
        }
        if o.flow_errors > 0 {
            log::error!("{}: {} flows failed", o.name, o.flow_errors);
            errors += 1;
        }
    }
    Ok(if errors == 0 {
        Status::Clean
    } else {
        Status::ErrorsRecorded
    })
}
