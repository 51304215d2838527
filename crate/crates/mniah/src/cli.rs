//! Command-line entry points.
//!
//! Subcommands: `build`, `filter`, `sweep`, `eval`, `fourr`, `traindata`,
//! `math`, `report`. Every command is rerunnable: with an intact call
//! cache a rerun performs zero network calls and reproduces its outputs
//! byte for byte. Exit codes: 0 success, 2 configuration, 3 ingestion,
//! 4 transport, 5 integrity, 6 validation, 1 anything else.

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, CorpusError, SourceQaItem};
use crate::error::{Classify, ErrorClass};
use crate::evaluation::{self, ConditionAxis, EvalError, EvalUnit, PromptMode, ReportMeta};
use crate::fourr::{self, FourRError};
use crate::llm::LlmError;
use crate::mathapp::{self, MathError};
use crate::runstore::{derive_seed, digest, RecordKind, RunStore, StoreError};
use crate::taskgen::{self, TaskGenError, TaskInstance};
use crate::tokenizer::{Tokenizer, TokenizerError};
use crate::traindata::{self, TrainDataError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    FourR(#[from] FourRError),
    #[error(transparent)]
    Train(#[from] TrainDataError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("I/O on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

impl Classify for CliError {
    fn class(&self) -> ErrorClass {
        match self {
            CliError::Usage(_) => ErrorClass::Config,
            CliError::Config(e) => e.class(),
            CliError::Tokenizer(e) => e.class(),
            CliError::Corpus(e) => e.class(),
            CliError::TaskGen(e) => e.class(),
            CliError::Llm(e) => e.class(),
            CliError::Eval(e) => e.class(),
            CliError::FourR(e) => e.class(),
            CliError::Train(e) => e.class(),
            CliError::Math(e) => e.class(),
            CliError::Store(e) => e.class(),
            CliError::Io { .. } => ErrorClass::Other,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(name = "mniah", about = "Multi-needle long-context benchmark harness", version)]
pub struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the run-store directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Bypass cache reads (fresh completions, stored under salted keys).
    #[arg(long, global = true)]
    pub no_cache: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Length,
    Depth,
    Distance,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Direct,
    Thinking,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Direct => PromptMode::Direct,
            ModeArg::Thinking => PromptMode::Thinking,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest the QA sources and build even-random instances over the
    /// length grid.
    Build {
        /// Instances output file (default: <out_dir>/instances.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated length grid override.
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Probe items closed-book and open-book, keep those answerable only
    /// with the passages; or intersect existing kept-id files.
    Filter {
        /// Endpoint to probe.
        #[arg(long)]
        endpoint: Option<String>,
        /// Kept-ids output file (default: <out_dir>/kept_<endpoint>.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Two or more kept-id files to intersect instead of probing.
        #[arg(long, num_args = 2..)]
        intersect: Vec<PathBuf>,
    },
    /// Build controlled instances along one axis, evaluate, report.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        endpoint: String,
        /// Restrict to ids listed in this file.
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "direct")]
        mode: ModeArg,
        /// Comma-separated grid override for the chosen axis (lengths,
        /// depths, or gaps).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an existing instances file.
    Eval {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long, value_enum, default_value = "direct")]
        mode: ModeArg,
        #[arg(long, value_enum)]
        axis: Option<AxisArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the K-round retrieve/reason loop over instances.
    Fourr {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        instances: PathBuf,
        /// Rounds per item (default: grid.k).
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        ids: Option<PathBuf>,
        /// Traces output file (default: <out_dir>/traces_<endpoint>.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the fine-tuning dataset from traces.
    Traindata {
        /// Rewriter endpoint.
        #[arg(long)]
        rewriter: String,
        /// Kept-id file to split and train on.
        #[arg(long)]
        ids: PathBuf,
        /// Traces file from `fourr` (K >= 2).
        #[arg(long)]
        traces: PathBuf,
        /// Train split size (default: 70% of ids).
        #[arg(long)]
        train_n: Option<usize>,
        /// Test split size (default: remainder).
        #[arg(long)]
        test_n: Option<usize>,
    },
    /// Generate and extract solutions for a problems file, score pass@1.
    Math {
        #[arg(long)]
        problems: Option<PathBuf>,
        #[arg(long)]
        generator: String,
        #[arg(long)]
        extractor: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate all report files from the run store alone.
    Report {},
}

/// Parses argv, runs, prints errors, returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.class().exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => return Err(CliError::Usage("--config <file> is required".into())),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = cli.cache_dir {
        config.cache_dir = dir;
    }
    if let Some(dir) = cli.out_dir {
        config.output_dir = dir;
    }
    std::fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let use_cache = !cli.no_cache;

    match cli.command {
        Command::Build { out, lengths } => cmd_build(&config, out, lengths),
        Command::Filter {
            endpoint,
            out,
            intersect,
        } => cmd_filter(&config, endpoint, out, intersect, use_cache),
        Command::Sweep {
            axis,
            endpoint,
            ids,
            mode,
            grid,
            out,
        } => cmd_sweep(&config, axis, &endpoint, ids, mode.into(), grid, out, use_cache),
        Command::Eval {
            instances,
            endpoint,
            mode,
            axis,
            out,
        } => cmd_eval(&config, &instances, &endpoint, mode.into(), axis, out, use_cache),
        Command::Fourr {
            endpoint,
            instances,
            k,
            ids,
            out,
        } => cmd_fourr(&config, &endpoint, &instances, k, ids, out, use_cache),
        Command::Traindata {
            rewriter,
            ids,
            traces,
            train_n,
            test_n,
        } => cmd_traindata(&config, &rewriter, &ids, &traces, train_n, test_n, use_cache),
        Command::Math {
            problems,
            generator,
            extractor,
            out,
        } => cmd_math(&config, problems, &generator, &extractor, out, use_cache),
        Command::Report {} => cmd_report(&config),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn meta_for(config: &RunConfig) -> ReportMeta {
    ReportMeta {
        config_hash: config.config_hash(),
        seed: config.seed,
        tokenizer_profile: config.tokenizer.name.clone(),
    }
}

fn manifest_for(config: &RunConfig, kind: &str) -> serde_json::Value {
    serde_json::json!({
        "kind": "manifest",
        "produced_by": kind,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "tokenizer_profile": config.tokenizer.name,
    })
}

fn items_path(config: &RunConfig) -> PathBuf {
    config
        .data
        .items
        .clone()
        .unwrap_or_else(|| config.output_dir.join("items.jsonl"))
}

fn load_items_map(config: &RunConfig) -> Result<BTreeMap<String, SourceQaItem>, CliError> {
    let path = items_path(config);
    let items = corpus::read_items(&path)?;
    Ok(items.into_iter().map(|i| (i.id.clone(), i)).collect())
}

fn read_id_file(path: &Path) -> Result<Vec<String>, CliError> {
    let raw = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

fn write_id_file(path: &Path, config: &RunConfig, ids: &[String]) -> Result<(), CliError> {
    let mut body = String::new();
    body.push_str(&format!("# config_hash={}\n", config.config_hash()));
    body.push_str(&format!("# seed={}\n", config.seed));
    body.push_str(&format!("# tokenizer_profile={}\n", config.tokenizer.name));
    for id in ids {
        body.push_str(id);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(io_err(path))
}

fn units_from(
    instances: Vec<TaskInstance>,
    items: &BTreeMap<String, SourceQaItem>,
) -> Result<Vec<EvalUnit>, CliError> {
    instances
        .into_iter()
        .map(|instance| {
            let item = items.get(&instance.item_id).ok_or_else(|| {
                CliError::Usage(format!(
                    "instance references item '{}' not present in the items file",
                    instance.item_id
                ))
            })?;
            Ok(EvalUnit {
                question: item.question.clone(),
                gold_answer: item.gold_answer.clone(),
                instance,
            })
        })
        .collect()
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Machine-readable companion to a run's CSV: the report rows, thinking
/// stats when present, and the items that could not be completed.
fn write_report_summary(
    config: &RunConfig,
    label: &str,
    run: &evaluation::EvalRun,
) -> Result<(), CliError> {
    let path = config.output_dir.join(format!("{label}.json"));
    let summary = serde_json::json!({
        "kind": "run_report",
        "label": label,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "tokenizer_profile": config.tokenizer.name,
        "report": run.report,
        "thinking": run.thinking,
        "incomplete": run.incomplete,
    });
    write_text(&path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

fn cmd_build(
    config: &RunConfig,
    out: Option<PathBuf>,
    lengths: Option<String>,
) -> Result<(), CliError> {
    let tokenizer = Tokenizer::resolve(config.tokenizer.clone())?;
    let mut items: Vec<SourceQaItem> = Vec::new();
    let mut rejected = 0usize;

    if let Some(path) = &config.data.hotpotqa {
        let report = corpus::load_hotpotqa(path, config.data.hotpot_sample, config.seed)?;
        rejected += report.rejected.len();
        for r in &report.rejected {
            log::warn!("hotpotqa record {} rejected: {}", r.id, r.reason);
        }
        items.extend(report.items);
    }
    if let Some(path) = &config.data.ire {
        let report = corpus::load_ire(path)?;
        rejected += report.rejected.len();
        for r in &report.rejected {
            log::warn!("ire record {} rejected: {}", r.id, r.reason);
        }
        items.extend(report.items);
    }
    if items.is_empty() {
        return Err(CliError::Usage(
            "no QA sources configured (set data.hotpotqa and/or data.ire)".into(),
        ));
    }
    let violations = corpus::validate_items(&items);
    if !violations.is_empty() {
        return Err(CliError::Usage(format!(
            "ingested items violate structure: {}",
            violations.join("; ")
        )));
    }

    let items_file = items_path(config);
    corpus::write_items(&items_file, &items)?;

    let filler = corpus::load_filler(&config.data.filler)?;
    let lengths: Vec<usize> = match lengths {
        Some(csv) => csv
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad length '{s}'")))
            })
            .collect::<Result<_, _>>()?,
        None => config.grid.lengths.clone(),
    };

    let mut instances = Vec::new();
    let mut failures = 0usize;
    for item in &items {
        for &len in &lengths {
            let seed = derive_seed(config.seed, &["build", &item.id, &len.to_string()]);
            match taskgen::build_even_random(&tokenizer, item, &filler, len, seed) {
                Ok(instance) => instances.push(instance),
                Err(e) => {
                    failures += 1;
                    log::warn!("item {} at {len} tokens: {e}", item.id);
                }
            }
        }
    }

    let out = out.unwrap_or_else(|| config.output_dir.join("instances.jsonl"));
    let manifest = manifest_for(config, "build");
    taskgen::write_instances(&out, &instances, Some(&manifest), taskgen::DEFAULT_SPILL_THRESHOLD_TOKENS)?;
    println!(
        "build: {} items ({} source records rejected), {} instances ({} construction failures) -> {}",
        items.len(),
        rejected,
        instances.len(),
        failures,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

fn cmd_filter(
    config: &RunConfig,
    endpoint: Option<String>,
    out: Option<PathBuf>,
    intersect: Vec<PathBuf>,
    use_cache: bool,
) -> Result<(), CliError> {
    if !intersect.is_empty() {
        let sets: Vec<std::collections::BTreeSet<String>> = intersect
            .iter()
            .map(|p| read_id_file(p).map(|ids| ids.into_iter().collect()))
            .collect::<Result<_, _>>()?;
        let result = evaluation::intersect_filtered(&sets)?;
        let out = out.unwrap_or_else(|| config.output_dir.join("intersection_ids.txt"));
        let ids: Vec<String> = result.into_iter().collect();
        write_id_file(&out, config, &ids)?;
        println!("filter: intersection of {} sets has {} ids -> {}", sets.len(), ids.len(), out.display());
        return Ok(());
    }

    let endpoint = endpoint.ok_or_else(|| {
        CliError::Usage("filter needs --endpoint (or --intersect with two or more files)".into())
    })?;
    let items_map = load_items_map(config)?;
    let items: Vec<SourceQaItem> = items_map.values().cloned().collect();
    let (_store, client) = config.build_client(use_cache)?;
    client.endpoint(&endpoint)?;
    let judge = config.judge_endpoint()?;

    let report = evaluation::filter_items(&client, &endpoint, judge, &items, config.seed)?;

    let out = out.unwrap_or_else(|| config.output_dir.join(format!("kept_{}.txt", sanitize(&endpoint))));
    write_id_file(&out, config, &report.kept_ids)?;

    let csv_path = config.output_dir.join(format!("filter_{}.csv", sanitize(&endpoint)));
    let mut csv = String::new();
    let meta = meta_for(config);
    csv.push_str(&format!("# config_hash={}\n# seed={}\n# tokenizer_profile={}\n", meta.config_hash, meta.seed, meta.tokenizer_profile));
    csv.push_str("item_id,closed_book_correct,open_book_correct,kept\n");
    for o in &report.outcomes {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            o.item_id, o.closed_book_correct, o.open_book_correct, o.kept
        ));
    }
    write_text(&csv_path, &csv)?;

    println!(
        "filter[{endpoint}]: {} items, kept {}, verdict failures {} -> {}",
        items.len(),
        report.kept_ids.len(),
        report.failed_items.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep / eval
// ---------------------------------------------------------------------------

fn restrict_items(
    items_map: BTreeMap<String, SourceQaItem>,
    ids: Option<PathBuf>,
) -> Result<Vec<SourceQaItem>, CliError> {
    match ids {
        None => Ok(items_map.into_values().collect()),
        Some(path) => {
            let keep = read_id_file(&path)?;
            Ok(keep.into_iter().filter_map(|id| items_map.get(&id).cloned()).collect())
        }
    }
}

fn parse_grid<T: std::str::FromStr>(csv: &str) -> Result<Vec<T>, CliError> {
    csv.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad grid value '{s}'")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &RunConfig,
    axis: AxisArg,
    endpoint: &str,
    ids: Option<PathBuf>,
    mode: PromptMode,
    grid: Option<String>,
    out: Option<PathBuf>,
    use_cache: bool,
) -> Result<(), CliError> {
    let tokenizer = Tokenizer::resolve(config.tokenizer.clone())?;
    let items = restrict_items(load_items_map(config)?, ids)?;
    if items.is_empty() {
        return Err(CliError::Usage("no items to sweep over".into()));
    }
    let filler = corpus::load_filler(&config.data.filler)?;

    let lengths = match (&grid, axis) {
        (Some(csv), AxisArg::Length) => parse_grid(csv)?,
        _ => config.grid.lengths.clone(),
    };
    let depths = match (&grid, axis) {
        (Some(csv), AxisArg::Depth) => parse_grid(csv)?,
        _ => config.grid.depths.clone(),
    };
    let gaps = match (&grid, axis) {
        (Some(csv), AxisArg::Distance) => parse_grid(csv)?,
        _ => config.grid.gaps.clone(),
    };

    let mut instances = Vec::new();
    let mut skipped = 0usize;
    let target = config.grid.sweep_target;
    for item in &items {
        let built: Vec<Result<TaskInstance, TaskGenError>> = match axis {
            AxisArg::Length => lengths
                .iter()
                .map(|&len| {
                    let seed = derive_seed(config.seed, &["sweep-length", &item.id, &len.to_string()]);
                    taskgen::build_even_random(&tokenizer, item, &filler, len, seed)
                })
                .collect(),
            AxisArg::Depth => depths
                .iter()
                .map(|&depth| {
                    let seed = derive_seed(config.seed, &["sweep-depth", &item.id, &depth.to_string()]);
                    taskgen::build_depth_controlled(
                        &tokenizer,
                        item,
                        &filler,
                        target,
                        depth,
                        config.grid.needle_interval,
                        seed,
                    )
                })
                .collect(),
            AxisArg::Distance => gaps
                .iter()
                .map(|&gap| {
                    let seed = derive_seed(config.seed, &["sweep-distance", &item.id, &gap.to_string()]);
                    taskgen::build_distance_controlled(
                        &tokenizer,
                        item,
                        &filler,
                        target,
                        config.grid.first_pos,
                        gap,
                        seed,
                    )
                })
                .collect(),
        };
        for result in built {
            match result {
                Ok(instance) => instances.push(instance),
                Err(e) => {
                    skipped += 1;
                    log::warn!("sweep construction skipped for {}: {e}", item.id);
                }
            }
        }
    }

    let items_map: BTreeMap<String, SourceQaItem> =
        items.into_iter().map(|i| (i.id.clone(), i)).collect();
    let units = units_from(instances, &items_map)?;
    let (_store, client) = config.build_client(use_cache)?;
    client.endpoint(endpoint)?;
    let judge = config.judge_endpoint()?;

    let eval_axis = match axis {
        AxisArg::Length => ConditionAxis::ContextLength,
        AxisArg::Depth => ConditionAxis::Depth,
        AxisArg::Distance => ConditionAxis::Gap,
    };
    let label = format!("sweep-{}-{}", eval_axis, sanitize(endpoint));
    let run = evaluation::run_eval(&client, endpoint, judge, &units, mode, eval_axis, &tokenizer, &label)?;

    let out = out.unwrap_or_else(|| config.output_dir.join(format!("{label}.csv")));
    write_text(&out, &run.report.to_csv(&meta_for(config)))?;
    write_report_summary(config, &label, &run)?;
    if let Some(thinking) = &run.thinking {
        let path = config.output_dir.join(format!("{label}_thinking.csv"));
        let mut csv = String::from("condition,n,mean_tokens,mean_tokens_correct,mean_tokens_incorrect\n");
        for row in &thinking.per_condition {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{:.2},{},{}\n",
                row.condition,
                row.n,
                row.mean_tokens,
                opt(row.mean_tokens_correct),
                opt(row.mean_tokens_incorrect)
            ));
        }
        write_text(&path, &csv)?;
    }
    println!(
        "sweep[{label}]: {} conditions, {} units, {} skipped constructions, {} incomplete -> {}",
        run.report.rows.len(),
        units.len(),
        skipped,
        run.incomplete.len(),
        out.display()
    );
    Ok(())
}

fn infer_axis(instances: &[TaskInstance]) -> ConditionAxis {
    let distinct = |f: fn(&TaskInstance) -> Option<f64>| {
        let mut values: Vec<i64> = instances
            .iter()
            .filter_map(f)
            .map(|v| (v * 1000.0).round() as i64)
            .collect();
        values.sort_unstable();
        values.dedup();
        values.len()
    };
    if distinct(|i| i.spec.first_depth_pct) > 1 {
        ConditionAxis::Depth
    } else if distinct(|i| i.spec.gap_tokens.map(|g| g as f64)) > 1 {
        ConditionAxis::Gap
    } else {
        ConditionAxis::ContextLength
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &RunConfig,
    instances_path: &Path,
    endpoint: &str,
    mode: PromptMode,
    axis: Option<AxisArg>,
    out: Option<PathBuf>,
    use_cache: bool,
) -> Result<(), CliError> {
    let tokenizer = Tokenizer::resolve(config.tokenizer.clone())?;
    let instances = taskgen::read_instances(instances_path)?;
    let axis = match axis {
        Some(AxisArg::Length) => ConditionAxis::ContextLength,
        Some(AxisArg::Depth) => ConditionAxis::Depth,
        Some(AxisArg::Distance) => ConditionAxis::Gap,
        None => infer_axis(&instances),
    };
    let items_map = load_items_map(config)?;
    let units = units_from(instances, &items_map)?;
    let (_store, client) = config.build_client(use_cache)?;
    client.endpoint(endpoint)?;
    let judge = config.judge_endpoint()?;

    let mode_name = match mode {
        PromptMode::Direct => "direct",
        PromptMode::Thinking => "thinking",
    };
    let label = format!("eval-{mode_name}-{}", sanitize(endpoint));
    let run = evaluation::run_eval(&client, endpoint, judge, &units, mode, axis, &tokenizer, &label)?;
    let out = out.unwrap_or_else(|| config.output_dir.join(format!("{label}.csv")));
    write_text(&out, &run.report.to_csv(&meta_for(config)))?;
    write_report_summary(config, &label, &run)?;
    for (item, error) in &run.incomplete {
        log::warn!("eval incomplete for {item}: {error}");
    }
    println!(
        "eval[{label}]: {} rows over {} units, {} incomplete -> {}",
        run.report.rows.len(),
        units.len(),
        run.incomplete.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fourr
// ---------------------------------------------------------------------------

fn cmd_fourr(
    config: &RunConfig,
    endpoint: &str,
    instances_path: &Path,
    k: Option<u32>,
    ids: Option<PathBuf>,
    out: Option<PathBuf>,
    use_cache: bool,
) -> Result<(), CliError> {
    let k = k.unwrap_or(config.grid.k);
    let instances = taskgen::read_instances(instances_path)?;
    let keep: Option<std::collections::BTreeSet<String>> = match ids {
        Some(path) => Some(read_id_file(&path)?.into_iter().collect()),
        None => None,
    };
    let instances: Vec<TaskInstance> = instances
        .into_iter()
        .filter(|i| keep.as_ref().map(|k| k.contains(&i.item_id)).unwrap_or(true))
        .collect();
    let items_map = load_items_map(config)?;
    let units = units_from(instances, &items_map)?;
    let (_store, client) = config.build_client(use_cache)?;
    client.endpoint(endpoint)?;
    let judge = config.judge_endpoint()?;

    let results: Vec<Result<fourr::IterationTrace, FourRError>> = units
        .par_iter()
        .map(|unit| {
            fourr::run_iterations(
                &client,
                endpoint,
                judge,
                &unit.instance,
                &unit.question,
                &unit.gold_answer,
                k,
            )
        })
        .collect();

    let mut traces = Vec::new();
    let mut first_error: Option<FourRError> = None;
    for result in results {
        match result {
            Ok(trace) => traces.push(trace),
            Err(e) => {
                log::warn!("fourr item failed: {e}");
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }

    let out = out.unwrap_or_else(|| config.output_dir.join(format!("traces_{}.jsonl", sanitize(endpoint))));
    let manifest = manifest_for(config, "fourr");
    fourr::write_traces(&out, &traces, Some(&manifest))?;

    let report = fourr::per_round_report(&traces);
    let csv_path = config.output_dir.join(format!("fourr_{}.csv", sanitize(endpoint)));
    write_text(&csv_path, &report.to_csv(&meta_for(config)))?;

    println!(
        "fourr[{endpoint}]: K={k}, {} traces complete -> {}",
        traces.len(),
        out.display()
    );
    match first_error {
        // Finished rounds are persisted; rerunning resumes from them.
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// traindata
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_traindata(
    config: &RunConfig,
    rewriter: &str,
    ids_path: &Path,
    traces_path: &Path,
    train_n: Option<usize>,
    test_n: Option<usize>,
    use_cache: bool,
) -> Result<(), CliError> {
    let tokenizer = Tokenizer::resolve(config.tokenizer.clone())?;
    let ids = read_id_file(ids_path)?;
    let train_n = train_n.unwrap_or_else(|| ids.len() * 7 / 10);
    let test_n = test_n.unwrap_or(ids.len().saturating_sub(train_n));
    let (train_ids, test_ids) = traindata::split_train_test(&ids, train_n, test_n, config.seed)?;

    let items_map = load_items_map(config)?;
    let traces: BTreeMap<String, fourr::IterationTrace> = fourr::read_traces(traces_path)?
        .into_iter()
        .map(|t| (t.item_id.clone(), t))
        .collect();
    let filler = corpus::load_filler(&config.data.filler)?;
    let (_store, client) = config.build_client(use_cache)?;
    client.endpoint(rewriter)?;

    let thinking = traindata::build_examples(
        &client,
        rewriter,
        &tokenizer,
        &items_map,
        &traces,
        &filler,
        &train_ids,
        config.seed,
        traindata::TargetStyle::NaturalThinking,
    )?;
    let direct = traindata::build_examples(
        &client,
        rewriter,
        &tokenizer,
        &items_map,
        &traces,
        &filler,
        &train_ids,
        config.seed,
        traindata::TargetStyle::DirectAnswer,
    )?;

    let manifest = |style: &str, count: usize| {
        serde_json::json!({
            "kind": "manifest",
            "produced_by": "traindata",
            "style": style,
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "tokenizer_profile": config.tokenizer.name,
            "train_items": train_ids.len(),
            "test_items": test_ids.len(),
            "records": count,
            "rewriter_endpoint": rewriter,
            "rewriter_decoding": traindata::rewriter_decoding(),
            "trainer": traindata::trainer_metadata(),
        })
    };

    let train_path = config.output_dir.join("train.jsonl");
    traindata::emit_training_file(
        &train_path,
        &manifest("natural_thinking", thinking.examples.len()),
        &thinking.examples,
    )?;
    let direct_path = config.output_dir.join("direct_answer.jsonl");
    traindata::emit_training_file(
        &direct_path,
        &manifest("direct_answer", direct.examples.len()),
        &direct.examples,
    )?;

    let mut test_units = Vec::new();
    for id in &test_ids {
        let item = items_map
            .get(id)
            .ok_or_else(|| TrainDataError::MissingItem(id.clone()))?;
        let context = traindata::extend_context(
            &tokenizer,
            item,
            &filler,
            traindata::item_seed(config.seed, id),
        )?;
        test_units.push((id.clone(), context, item.question.clone(), item.gold_answer.clone()));
    }
    let test_path = config.output_dir.join("test.jsonl");
    traindata::emit_test_file(&test_path, &manifest("test", test_units.len()), &test_units)?;

    for (id, reason) in &thinking.drops {
        log::warn!("rewrite dropped for {id}: {reason}");
    }

    let manifest_path = config.output_dir.join("traindata_manifest.json");
    let summary = serde_json::json!({
        "kind": "traindata_manifest",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "tokenizer_profile": config.tokenizer.name,
        "split": { "train": train_ids.len(), "test": test_ids.len() },
        "records": {
            "natural_thinking": thinking.examples.len(),
            "direct_answer": direct.examples.len(),
            "test": test_units.len(),
            "dropped_rewrites": thinking.drops.len(),
        },
        "files": {
            "train": train_path.display().to_string(),
            "direct_answer": direct_path.display().to_string(),
            "test": test_path.display().to_string(),
        },
        "rewriter_endpoint": rewriter,
        "rewriter_decoding": traindata::rewriter_decoding(),
        "trainer": traindata::trainer_metadata(),
    });
    write_text(&manifest_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;

    println!(
        "traindata: split {}/{} -> {} thinking records ({} drops), {} direct records, {} test items",
        train_ids.len(),
        test_ids.len(),
        thinking.examples.len(),
        thinking.drops.len(),
        direct.examples.len(),
        test_units.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// math
// ---------------------------------------------------------------------------

fn cmd_math(
    config: &RunConfig,
    problems: Option<PathBuf>,
    generator: &str,
    extractor: &str,
    out: Option<PathBuf>,
    use_cache: bool,
) -> Result<(), CliError> {
    let problems_path = problems
        .or_else(|| config.data.problems.clone())
        .ok_or_else(|| CliError::Usage("math needs --problems (or data.problems)".into()))?;
    let problems = mathapp::read_problems(&problems_path)?;
    let (store, client) = config.build_client(use_cache)?;
    client.endpoint(generator)?;
    client.endpoint(extractor)?;

    let score = mathapp::run_pipeline(&client, generator, extractor, &problems)?;

    let run_label = format!("math-{}-{}", sanitize(generator), sanitize(extractor));
    for p in &score.problems {
        let key = digest(&["math_outcome", &run_label, &p.problem_id]);
        let payload = serde_json::json!({
            "type": "math_outcome",
            "run": run_label,
            "problem_id": p.problem_id,
            "gold": p.gold_answer,
            "correct": p.correct,
            "n": p.parsed.len(),
            "pass_at_1": p.pass_at_1,
        });
        match store.put(RecordKind::Report, &key, &payload) {
            Ok(_) | Err(StoreError::Conflict { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }

    let out = out.unwrap_or_else(|| config.output_dir.join(format!("{run_label}.csv")));
    write_text(&out, &mathapp::results_csv(&score, &meta_for(config)))?;
    println!(
        "math[{run_label}]: {} problems, dataset score {:.1} -> {}",
        score.problems.len(),
        score.score,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(config: &RunConfig) -> Result<(), CliError> {
    let store = RunStore::open(&config.cache_dir, config.config_hash())?;
    let meta = meta_for(config);

    let mut eval_outcomes: BTreeMap<String, Vec<evaluation::ItemOutcome>> = BTreeMap::new();
    let mut math_rows: BTreeMap<String, Vec<serde_json::Value>> = BTreeMap::new();
    let mut corrupt = Vec::new();
    for record in store.scan(RecordKind::Report)? {
        match record {
            Err(e) => corrupt.push(e.to_string()),
            Ok(r) => {
                match r.payload.get("type").and_then(|t| t.as_str()) {
                    Some("item_outcome") => {
                        if let Ok(outcome) =
                            serde_json::from_value::<evaluation::ItemOutcome>(r.payload.clone())
                        {
                            eval_outcomes.entry(outcome.run.clone()).or_default().push(outcome);
                        } else {
                            corrupt.push(format!("record {} has malformed item_outcome", r.key));
                        }
                    }
                    Some("math_outcome") => {
                        let run = r.payload["run"].as_str().unwrap_or("math").to_string();
                        math_rows.entry(run).or_default().push(r.payload.clone());
                    }
                    _ => {}
                }
            }
        }
    }

    let mut written = Vec::new();
    for (run, mut outcomes) in eval_outcomes {
        outcomes.sort_by(|a, b| {
            (a.condition, &a.item_id)
                .partial_cmp(&(b.condition, &b.item_id))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let axis = outcomes.first().map(|o| o.axis).unwrap_or(ConditionAxis::ContextLength);
        let report = evaluation::report::report_from_outcomes(axis, &outcomes);
        let path = config.output_dir.join(format!("report_{}.csv", sanitize(&run)));
        write_text(&path, &report.to_csv(&meta))?;
        written.push(path.display().to_string());
    }

    // Per-round accuracy straight from persisted trace rounds.
    let mut round_outcomes: Vec<evaluation::ItemOutcome> = Vec::new();
    for record in store.scan(RecordKind::TraceRound)? {
        match record {
            Err(e) => corrupt.push(e.to_string()),
            Ok(r) => match serde_json::from_value::<fourr::RoundRecord>(r.payload.clone()) {
                Ok(round) => round_outcomes.push(evaluation::ItemOutcome {
                    record_type: "item_outcome".into(),
                    run: "fourr".into(),
                    axis: ConditionAxis::Round,
                    condition: f64::from(round.round),
                    item_id: r.key.clone(),
                    correct: round.verdict.correct,
                    answer: round.answer,
                    thinking_tokens: None,
                    thinking_extracted: None,
                }),
                Err(e) => corrupt.push(format!("trace round {}: {e}", r.key)),
            },
        }
    }
    if !round_outcomes.is_empty() {
        let report = evaluation::report::report_from_outcomes(ConditionAxis::Round, &round_outcomes);
        let path = config.output_dir.join("report_fourr.csv");
        write_text(&path, &report.to_csv(&meta))?;
        written.push(path.display().to_string());
    }

    for (run, rows) in math_rows {
        let mut csv = String::new();
        csv.push_str(&format!(
            "# config_hash={}\n# seed={}\n# tokenizer_profile={}\n",
            meta.config_hash, meta.seed, meta.tokenizer_profile
        ));
        csv.push_str("problem_id,gold,correct,n,pass_at_1\n");
        let mut sum = 0.0;
        for row in &rows {
            sum += row["pass_at_1"].as_f64().unwrap_or(0.0);
            csv.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                row["problem_id"].as_str().unwrap_or(""),
                row["gold"],
                row["correct"],
                row["n"],
                row["pass_at_1"].as_f64().unwrap_or(0.0)
            ));
        }
        csv.push_str(&format!("# dataset_score={:.1}\n", 100.0 * sum / rows.len().max(1) as f64));
        let path = config.output_dir.join(format!("report_{}.csv", sanitize(&run)));
        write_text(&path, &csv)?;
        written.push(path.display().to_string());
    }

    let calls = store.count(RecordKind::Call)?;
    let rounds = store.count(RecordKind::TraceRound)?;
    let reports = store.count(RecordKind::Report)?;
    let summary = serde_json::json!({
        "config_hash": meta.config_hash,
        "seed": meta.seed,
        "tokenizer_profile": meta.tokenizer_profile,
        "store": { "calls": calls, "trace_rounds": rounds, "reports": reports },
        "report_files": written,
        "corrupt_records": corrupt,
    });
    let summary_path = config.output_dir.join("report_summary.json");
    write_text(&summary_path, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;

    if calls == 0 && rounds == 0 && reports == 0 {
        log::warn!("run store is empty; nothing to report");
        println!("report: store empty -> {}", summary_path.display());
    } else {
        for c in &corrupt {
            log::warn!("corrupt record skipped: {c}");
        }
        println!(
            "report: {} report files, {} corrupt records -> {}",
            written.len(),
            corrupt.len(),
            summary_path.display()
        );
    }
    Ok(())
}
