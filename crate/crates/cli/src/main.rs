use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctnli_core::corpus::InstanceSource;
use ctnli_core::pipeline::{
    self, CorpusConfig, Pipeline, PipelineError, ReportFormat, RunConfig, Stage, PROMPTS_FILE,
};
use ctnli_core::prompt::{prompt_length_report, read_prompt_dump};
use ctnli_core::tokenize::TokenizerConfig;

/// Prompting experiments for natural language inference over clinical
/// trial reports.
#[derive(Debug, Parser)]
#[command(name = "ctnli", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a corpus and print its statistics.
    Ingest(CorpusArgs),
    /// Render prompts for the configured targets.
    Render(RunArgs),
    /// Query backends (or import prediction files) for every prompt.
    Infer(RunArgs),
    /// Combine member predictions by voting.
    Ensemble(RunArgs),
    /// Score every system.
    Evaluate(RunArgs),
    /// Write Markdown/CSV/JSON reports.
    Report(ReportArgs),
    /// Corpus statistics and, if prompts were rendered, prompt lengths.
    Stats(CorpusArgs),
    /// All stages, from ingest to report.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only run this backend (and ensembles that can be formed from it).
    #[arg(long)]
    backend: Option<String>,
    /// Skip stages whose artifacts are already up to date.
    #[arg(long)]
    resume: bool,
    /// Require every ensemble member to cover the same instances.
    #[arg(long)]
    strict_coverage: bool,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[command(flatten)]
    source: CorpusSource,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
    /// Print JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
struct CorpusSource {
    #[arg(long, conflicts_with_all = ["ctr_dir", "instances"])]
    config: Option<PathBuf>,
    /// Directory of CTR JSON files.
    #[arg(long, requires = "instances")]
    ctr_dir: Option<PathBuf>,
    /// Instance files as `split=path` (or a path whose name names the split).
    #[arg(long, num_args = 1..)]
    instances: Vec<InstanceSource>,
    #[arg(long)]
    contrast_mapping: Option<PathBuf>,
    #[arg(long)]
    gold: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Manifest of a run whose evaluation has completed.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// md, csv or json; all three by default.
    #[arg(long, value_delimiter = ',')]
    format: Vec<ReportFormat>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out.to_path_buf();
    }
    Ok(config)
}

fn run_stages(args: &RunArgs, last: Stage) -> Result<(), PipelineError> {
    let mut config = load_config(&args.config, args.seed, args.out.as_deref())?;
    if let Some(name) = &args.backend {
        config.restrict_to_backend(name)?;
    }
    if args.strict_coverage {
        config.force_strict_coverage();
    }
    let mut pipeline = Pipeline::new(config)?.resume(args.resume);
    let manifest = pipeline.run_until(last)?;
    for (name, stats) in pipeline.infer_stats() {
        eprintln!(
            "{name}: {} prompts, {} cached, {} requests, {} retries, {} fallbacks",
            stats.prompts, stats.cache_hits, stats.requests, stats.retries, stats.fallbacks
        );
    }
    let skipped: Vec<String> = Stage::ALL
        .into_iter()
        .filter(|s| *s <= last && !pipeline.executed_stages().contains(s))
        .map(|s| s.to_string())
        .collect();
    if !skipped.is_empty() {
        eprintln!("up to date: {}", skipped.join(", "));
    }
    println!("{}", manifest.output_dir.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}

fn corpus_config(source: &CorpusSource) -> CorpusConfig {
    CorpusConfig {
        ctr_dir: source.ctr_dir.clone().unwrap_or_default(),
        instances: source.instances.clone(),
        contrast_mapping: source.contrast_mapping.clone(),
        gold_labels: source.gold.clone(),
    }
}

fn corpus_command(args: &CorpusArgs, run_ingest: bool) -> Result<(), PipelineError> {
    let (corpus, tokenizer, out) = match &args.source.config {
        Some(path) => {
            let config = load_config(path, args.seed, args.out.as_deref())?;
            if run_ingest {
                Pipeline::new(config.clone())?
                    .resume(args.resume)
                    .run_until(Stage::Ingest)?;
            }
            (config.corpus, config.tokenizer, Some(config.output_dir))
        }
        None => (corpus_config(&args.source), TokenizerConfig::default(), None),
    };
    let stats = pipeline::corpus_stats(&corpus, &tokenizer)?;
    let prompts_path = out.map(|o| o.join(PROMPTS_FILE)).filter(|p| p.exists());
    let lengths = match (&prompts_path, run_ingest) {
        (Some(path), false) => {
            let prompts = read_prompt_dump(path)?;
            Some(prompt_length_report(&prompts)?)
        }
        _ => None,
    };
    if args.json {
        let value = serde_json::json!({ "corpus": stats, "prompt_lengths": lengths });
        println!("{}", serde_json::to_string_pretty(&value).expect("stats serialize"));
        return Ok(());
    }
    print!("{stats}");
    if let Some(rows) = lengths {
        println!();
        println!("| Template | Plan | Prompts | Mean tokens | Min | Max |");
        println!("|---|---|---|---|---|---|");
        for row in rows {
            println!(
                "| {} | {} | {} | {:.1} | {} | {} |",
                row.template_id, row.plan, row.count, row.mean, row.min, row.max
            );
        }
    }
    Ok(())
}

fn report_command(args: &ReportArgs) -> Result<(), PipelineError> {
    let formats = if args.format.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        args.format.clone()
    };
    let manifest_path = match (&args.manifest, &args.config) {
        (Some(manifest), _) => manifest.clone(),
        (None, Some(config)) => {
            let config = load_config(config, args.seed, args.out.as_deref())?;
            let mut pipeline = Pipeline::new(config)?.resume(args.resume);
            let manifest = pipeline.run_until(Stage::Report)?;
            manifest.output_dir.join(pipeline::MANIFEST_FILE)
        }
        (None, None) => unreachable!("clap requires --manifest or --config"),
    };
    for path in pipeline::report_from_manifest(&manifest_path, &formats)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Ingest(args) => corpus_command(args, true),
        Command::Stats(args) => corpus_command(args, false),
        Command::Render(args) => run_stages(args, Stage::Render),
        Command::Infer(args) => run_stages(args, Stage::Infer),
        Command::Ensemble(args) => run_stages(args, Stage::Ensemble),
        Command::Evaluate(args) => run_stages(args, Stage::Evaluate),
        Command::Run(args) => run_stages(args, Stage::Report),
        Command::Report(args) => report_command(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            log::debug!("{error:?}");
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
