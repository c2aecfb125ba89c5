//! `lra` — drive the Look-Recite-Answer engine from the shell.
//!
//! Exit codes: 0 success, 2 configuration or input problems, 3 runtime
//! stage failures. Every inference writes its trace file even when the
//! run fails, so there is always an audit record to inspect.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use lra_core::dataset;
use lra_core::error::ErrorClass;
use lra_core::eval;
use lra_core::gateway::{Gateway, GatewayOptions, Role};
use lra_core::perception::InferenceRequest;
use lra_core::pipeline::{parse_trace, serialize_trace, Pipeline, PipelineConfig, StageOutputs};
use lra_core::prompts::PromptPack;
use lra_core::recite::RouterMode;
use lra_core::verdict::ScoringMode;
use lra_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lra",
    version,
    about = "Look-Recite-Answer inference over frozen model backends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one visual question through the three-stage pipeline
    Infer(InferArgs),
    /// Inspect recorded trace files
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Run benchmark evaluations and annotate their reports
    Eval(EvalArgs),
    /// Build and review router-training datasets
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Args)]
struct InferArgs {
    /// Image reference passed to the perception backend
    #[arg(long)]
    image: String,
    /// The question to answer
    #[arg(long)]
    question: String,
    /// Explicit candidate answers, pipe-separated ("Apple Scab|Apple Rust");
    /// omitted candidates are parsed from the question or nominated
    #[arg(long)]
    options: Option<String>,
    /// Configuration file (falls back to $LRA_CONFIG)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured retrieval-query router
    #[arg(long, value_enum)]
    router_mode: Option<RouterModeArg>,
    /// Override the configured candidate-scoring procedure
    #[arg(long, value_enum)]
    scoring_mode: Option<ScoringModeArg>,
    /// Trace identifier; defaults to a digest of the request
    #[arg(long)]
    request_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouterModeArg {
    Template,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringModeArg {
    Judge,
    Logprob,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Validate a trace file and print a stage summary
    Show {
        /// Trace file written by `infer` or `eval`
        file: PathBuf,
    },
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct EvalArgs {
    #[command(subcommand)]
    command: Option<EvalCommand>,
    /// Benchmark items, one JSON object per line
    #[arg(long, required = true)]
    benchmark: Option<PathBuf>,
    /// Task tier specifications (JSON map)
    #[arg(long, required = true)]
    tasks: Option<PathBuf>,
    /// Configuration file (falls back to $LRA_CONFIG)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling seed for complementary tasks; required here or in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report and per-item traces
    #[arg(long, required = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Attach a failure-taxonomy tag to an incorrect item
    Tag {
        /// Report file produced by `lra eval`
        #[arg(long)]
        report: PathBuf,
        /// Item to annotate
        #[arg(long)]
        item: String,
        /// One of: ambiguous_visual_evidence, candidate_incompleteness,
        /// temporal_reasoning_failure, context_integration_failure
        #[arg(long)]
        tag: String,
        /// Free-form annotation stored alongside the tag
        #[arg(long)]
        note: Option<String>,
    },
    /// Render accuracy deltas against a published baseline row
    Compare {
        /// Use a report's accuracies instead of the published numbers
        #[arg(long)]
        report: Option<PathBuf>,
        /// Baseline row to compare against
        #[arg(long, default_value = "QwenVLM-72B")]
        against: String,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Sample entity pairs and collect teacher instructions into a
    /// curriculum-ordered training file
    Build {
        /// Entity corpus (JSON lines)
        #[arg(long)]
        corpus: PathBuf,
        /// Number of pairs to draw across the three difficulty levels
        #[arg(long)]
        total: usize,
        /// Sampling seed; the same corpus, total, and seed reproduce the file
        #[arg(long)]
        seed: u64,
        /// Output training file (JSON lines, curriculum order)
        #[arg(long)]
        out: PathBuf,
        /// Completed review worksheet whose approvals mark records verified
        #[arg(long)]
        review: Option<PathBuf>,
        /// Configuration file naming the teacher profile (falls back to $LRA_CONFIG)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw a human-review worksheet from an exported training file
    Review {
        /// Exported training file to sample from
        #[arg(long = "in")]
        input: PathBuf,
        /// Worksheet size (clamped to the fine-grained rows available)
        #[arg(long)]
        size: usize,
        /// Sampling seed; the same export, size, and seed reproduce the draw
        #[arg(long)]
        seed: u64,
        /// Worksheet destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // Die quietly on a closed stdout (`lra eval ... | head`) instead of
    // panicking: restore the default SIGPIPE disposition Rust masks.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.class() {
                ErrorClass::Config => ExitCode::from(2),
                ErrorClass::Stage => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Infer(args) => infer(args),
        Command::Trace { command } => match command {
            TraceCommand::Show { file } => trace_show(&file),
        },
        Command::Eval(args) => match args.command {
            Some(EvalCommand::Tag {
                report,
                item,
                tag,
                note,
            }) => eval_tag(&report, &item, &tag, note),
            Some(EvalCommand::Compare { report, against }) => eval_compare(report, &against),
            None => eval_run(args),
        },
        Command::Dataset { command } => match command {
            DatasetCommand::Build {
                corpus,
                total,
                seed,
                out,
                review,
                config,
            } => dataset_build(&corpus, total, seed, &out, review, config),
            DatasetCommand::Review {
                input,
                size,
                seed,
                out,
            } => dataset_review(&input, size, seed, out),
        },
    }
}

/// Resolve the config path: explicit flag first, then $LRA_CONFIG.
fn load_config(flag: Option<PathBuf>) -> Result<PipelineConfig> {
    let path = flag
        .or_else(|| std::env::var_os("LRA_CONFIG").map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config("no configuration file: pass --config or set LRA_CONFIG".into())
        })?;
    PipelineConfig::from_file(&path)
}

fn split_options(raw: &str) -> Result<Vec<String>> {
    let options: Vec<String> = raw
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if options.len() < 2 {
        return Err(Error::Config(format!(
            "--options needs at least 2 pipe-separated values, got {}",
            options.len()
        )));
    }
    Ok(options)
}

/// Deterministic default request id: same request, same trace filename.
fn derive_request_id(image: &str, question: &str, options: Option<&str>) -> String {
    let mut hasher = Sha256::new();
    for part in [image, question, options.unwrap_or("")] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("req-{hex}")
}

fn infer(args: InferArgs) -> Result<()> {
    let mut config = load_config(args.config)?;
    if let Some(mode) = args.router_mode {
        config.router_mode = match mode {
            RouterModeArg::Template => RouterMode::Template,
            RouterModeArg::Model => RouterMode::Model,
        };
    }
    if let Some(mode) = args.scoring_mode {
        config.scoring_mode = match mode {
            ScoringModeArg::Judge => ScoringMode::Judge,
            ScoringModeArg::Logprob => ScoringMode::Logprob,
        };
    }
    let trace_dir = config
        .trace_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("traces"));

    let explicit_options = args.options.as_deref().map(split_options).transpose()?;
    let request_id = args.request_id.unwrap_or_else(|| {
        derive_request_id(&args.image, &args.question, args.options.as_deref())
    });
    let request = InferenceRequest {
        image_ref: args.image,
        question: args.question,
        explicit_options,
        request_id: request_id.clone(),
    };

    let pipeline = Pipeline::new(config)?;
    let (trace, outcome) = pipeline.run_inference(&request);

    std::fs::create_dir_all(&trace_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", trace_dir.display())))?;
    let trace_path = trace_dir.join(format!("{request_id}.json"));
    std::fs::write(&trace_path, serialize_trace(&trace))
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", trace_path.display())))?;

    match outcome {
        Ok(prediction) => {
            println!("prediction: {}", prediction.chosen.label);
            if prediction.tie_broken {
                println!("note: tie among top scores; least-index candidate chosen");
            }
            println!();
            let labels = candidate_labels(&trace);
            println!("{:>3}  {:<28} {:>8}  {}", "#", "candidate", "score", "mode");
            for verdict in &prediction.verdicts {
                let label = labels
                    .get(&verdict.candidate_index)
                    .map(String::as_str)
                    .unwrap_or("?");
                println!(
                    "{:>3}  {:<28} {:>8.4}  {}",
                    verdict.candidate_index,
                    label,
                    verdict.score,
                    mode_name(verdict.mode)
                );
            }
            println!();
            println!("trace: {}", trace_path.display());
            Ok(())
        }
        Err(err) => {
            eprintln!("trace: {}", trace_path.display());
            Err(err)
        }
    }
}

fn mode_name(mode: ScoringMode) -> &'static str {
    match mode {
        ScoringMode::Judge => "judge",
        ScoringMode::Logprob => "logprob",
    }
}

fn candidate_labels(trace: &lra_core::pipeline::PipelineTrace) -> BTreeMap<usize, String> {
    let mut labels = BTreeMap::new();
    for stage in &trace.stages {
        if let StageOutputs::Candidates { resolution } = &stage.outputs {
            for candidate in &resolution.set.candidates {
                labels.insert(candidate.index, candidate.label.clone());
            }
        }
    }
    labels
}

fn trace_show(file: &Path) -> Result<()> {
    let raw = std::fs::read_to_string(file)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", file.display())))?;
    let trace = parse_trace(&raw)?;
    println!("trace {} (version {})", trace.request_id, trace.trace_version);
    println!("image: {}", trace.request.image_ref);
    println!("question: {}", trace.request.question);
    println!("created: {}", trace.created_at);
    println!();
    println!(
        "{:<12} {:>6} {:>7} {:>8}  {}",
        "stage", "calls", "cached", "wall_ms", "notes"
    );
    for stage in &trace.stages {
        let cached = cached_count(&stage.outputs);
        let notes = if stage.fallbacks.is_empty() {
            String::new()
        } else {
            stage.fallbacks.join("; ")
        };
        println!(
            "{:<12} {:>6} {:>7} {:>8}  {}",
            stage.stage, stage.backend_calls, cached, stage.wall_ms, notes
        );
    }
    println!();
    match (&trace.prediction, &trace.failure) {
        (Some(prediction), _) => {
            let score = prediction
                .verdicts
                .iter()
                .find(|v| v.candidate_index == prediction.chosen.index)
                .map(|v| v.score)
                .unwrap_or(f64::NAN);
            println!(
                "prediction: {} (score {:.4}{})",
                prediction.chosen.label,
                score,
                if prediction.tie_broken { ", tie-broken" } else { "" }
            );
        }
        (None, Some(failure)) => {
            println!("failed at stage `{}`: {}", failure.stage, failure.message)
        }
        (None, None) => println!("trace carries neither prediction nor failure"),
    }
    Ok(())
}

fn cached_count(outputs: &StageOutputs) -> usize {
    match outputs {
        StageOutputs::Look { cache_hit, .. } => *cache_hit as usize,
        StageOutputs::Candidates { .. } => 0,
        StageOutputs::Recite { outcome } => outcome
            .items
            .iter()
            .filter(|item| item.knowledge.cache_hit)
            .count(),
        StageOutputs::Answer { verdicts } => {
            verdicts.iter().filter(|verdict| verdict.cache_hit).count()
        }
    }
}

fn eval_run(args: EvalArgs) -> Result<()> {
    let benchmark_path = args.benchmark.expect("clap enforces --benchmark");
    let tasks_path = args.tasks.expect("clap enforces --tasks");
    let out_dir = args.out.expect("clap enforces --out");

    let config = load_config(args.config)?;
    let seed = args.seed.or(config.seed).ok_or_else(|| {
        Error::Config(
            "evaluation sampling needs an explicit seed: pass --seed or set `seed` in the config"
                .into(),
        )
    })?;

    let by_task = eval::load_benchmark(&benchmark_path)?;
    let specs = eval::load_task_specs(&tasks_path)?;
    let selection = eval::two_tier_select(&by_task, &specs, seed)?;
    println!(
        "selected {} items across {} tasks (seed {seed})",
        selection.len(),
        by_task.len()
    );

    let pipeline = Pipeline::new(config)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let report = eval::evaluate(&selection, &pipeline, seed, &out_dir.join("traces"))?;

    let report_path = out_dir.join("report.json");
    eval::save_report(&report, &report_path)?;
    println!();
    print!("{}", eval::render_report_table(&report)?);
    println!();
    println!("report: {}", report_path.display());
    Ok(())
}

fn eval_tag(report_path: &Path, item: &str, tag: &str, note: Option<String>) -> Result<()> {
    let kind = eval::ErrorTagKind::parse(tag)?;
    let mut report = eval::load_report(report_path)?;
    eval::tag_error(&mut report, item, kind, note)?;
    eval::save_report(&report, report_path)?;
    let tagged: usize = report.tag_counts.values().sum();
    println!("tagged {item} as {tag} ({tagged} item(s) tagged)");
    for (name, count) in &report.tag_counts {
        println!(
            "  {:<28} {:>4}  {:>6}%",
            name,
            count,
            eval::render_percent(*count, tagged)?
        );
    }
    Ok(())
}

fn eval_compare(report: Option<PathBuf>, against: &str) -> Result<()> {
    let table = eval::BaselineTable::bundled();
    let (ours, ours_label) = match report {
        Some(path) => {
            let report = eval::load_report(&path)?;
            (eval::report_hundredths(&report)?, "evaluated run".to_string())
        }
        None => (
            table.row_hundredths(&table.ours_label)?,
            table.ours_label.clone(),
        ),
    };
    let baseline = table.row_hundredths(against)?;
    let rows = eval::compare_baselines(&ours, &baseline)?;
    println!("ours row: {ours_label}");
    print!(
        "{}",
        eval::render_comparison_table(&rows, against, &table.description)
    );
    Ok(())
}

fn dataset_build(
    corpus: &Path,
    total: usize,
    seed: u64,
    out: &Path,
    review: Option<PathBuf>,
    config_flag: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(config_flag)?;
    let teacher = config
        .profiles
        .iter()
        .find(|profile| profile.role == Role::Teacher)
        .ok_or_else(|| Error::Config("dataset building needs a teacher-role profile".into()))?
        .id
        .clone();
    let pack = match &config.prompt_dir {
        Some(dir) => PromptPack::from_dir(dir)?,
        None => PromptPack::default(),
    };
    let gateway = Gateway::new(
        config.profiles.clone(),
        GatewayOptions {
            fixtures_path: config.fixtures_path.clone(),
            cache_path: config.cache_path.clone(),
            ..GatewayOptions::default()
        },
    )?;

    let load = dataset::load_entities(corpus)?;
    for warning in &load.warnings {
        eprintln!("warning: {warning}");
    }
    let mut output = dataset::build_dataset(
        &load.entities,
        total,
        seed,
        &teacher,
        &gateway,
        &pack,
        config.concurrency_limit,
    )?;
    for warning in &output.warnings {
        eprintln!("warning: {warning}");
    }

    if let Some(worksheet_path) = review {
        let raw = std::fs::read_to_string(&worksheet_path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", worksheet_path.display()))
        })?;
        let rows: Vec<dataset::ReviewRow> = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("malformed review worksheet: {e}")))?;
        let approved = dataset::apply_review(&mut output.records, &rows);
        println!("review applied: {approved} record(s) marked human-verified");
    }

    let summary = dataset::export_curriculum(&output.records, out)?;
    println!(
        "exported {} rows to {} (levels: {} coarse / {} medium / {} fine; {} verified)",
        summary.total,
        out.display(),
        summary.per_level[0],
        summary.per_level[1],
        summary.per_level[2],
        summary.human_verified
    );
    if !output.warnings.is_empty() {
        println!("{} pair(s) dropped; see warnings above", output.warnings.len());
    }
    Ok(())
}

fn dataset_review(input: &Path, size: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let rows = dataset::load_export(input)?;
    let worksheet = dataset::sample_review_worksheet(&rows, size, seed);
    let mut rendered =
        serde_json::to_string_pretty(&worksheet).expect("worksheets always serialize");
    rendered.push('\n');
    match out {
        Some(path) => {
            std::fs::write(&path, rendered)
                .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            println!(
                "worksheet with {} row(s) written to {}",
                worksheet.len(),
                path.display()
            );
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
