//! Stage-oriented command-line driver for the annotation pipeline.
//!
//! Exit codes are a stable contract: 0 on success, 1 when some moments were
//! skipped (partial failure), 2 on config or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use figpipe_core::config::{validate_config, PipelineConfig};
use figpipe_core::pipeline::{run_stage, StageContext, StageSpec};

#[derive(Parser)]
#[command(
    name = "figpipe",
    version,
    about = "Fine-grained video-text annotation pipeline"
)]
struct Cli {
    /// Pipeline config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Response cache directory shared by all backends.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Worker pool size per stage.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Run seed: feeds mock backends, sampling, and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Re-run the stage even when the manifest matches.
    #[arg(long, global = true)]
    force: bool,

    /// Use deterministic mock backends instead of HTTP.
    #[arg(long, global = true)]
    mock: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KeyframesArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionStaticsArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    keyframes: PathBuf,
    #[arg(long)]
    out_raw: PathBuf,
    #[arg(long)]
    out_candidates: PathBuf,
}

#[derive(Args)]
struct CaptionDynamicsArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out_raw: PathBuf,
    #[arg(long)]
    out_candidates: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    disturbed: PathBuf,
    #[arg(long)]
    statics: PathBuf,
    #[arg(long)]
    dynamics: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_candidates: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_embeddings: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_trace: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    moments: PathBuf,
    #[arg(long)]
    candidate_embeddings: PathBuf,
    #[arg(long)]
    statics: PathBuf,
    #[arg(long)]
    dynamics: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scored: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score cutoff; candidates below it are flagged filtered. Overrides the
    /// config value.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Input schema: `coarse` (moments) or `fig` (annotated).
    #[arg(long, default_value = "fig")]
    schema: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalMetricsArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Split moments into segments and pick key frames.
    Keyframes(KeyframesArgs),
    /// Describe key frames and rewrite static caption candidates.
    CaptionStatics(CaptionStaticsArgs),
    /// VQA-guided dynamics captioning.
    CaptionDynamics(CaptionDynamicsArgs),
    /// Generate disturbed captions and select training triplets.
    Perturb(PerturbArgs),
    /// Embed moments, training triplets, and candidates.
    Embed(EmbedArgs),
    /// Train the noise evaluator on disturbed embeddings.
    TrainEvaluator(TrainArgs),
    /// Score caption candidates with a trained evaluator.
    Score(ScoreArgs),
    /// Select highest-score captions and apply the filter threshold.
    Select(SelectArgs),
    /// Corpus statistics and many-to-many counts.
    Stats(StatsArgs),
    /// Recall metrics for prediction files.
    EvalMetrics(EvalMetricsArgs),
    /// Validate the config and echo its normalized form.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    match &cli.config {
        Some(path) => Ok(validate_config(path)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn spec_for(command: &Command, config: &PipelineConfig) -> anyhow::Result<Option<StageSpec>> {
    let spec = match command {
        Command::Keyframes(a) => StageSpec::Keyframes {
            moments: a.moments.clone(),
            frames: a.frames.clone(),
            out: a.out.clone(),
        },
        Command::CaptionStatics(a) => StageSpec::CaptionStatics {
            moments: a.moments.clone(),
            keyframes: a.keyframes.clone(),
            out_raw: a.out_raw.clone(),
            out_candidates: a.out_candidates.clone(),
        },
        Command::CaptionDynamics(a) => StageSpec::CaptionDynamics {
            moments: a.moments.clone(),
            frames: a.frames.clone(),
            out_raw: a.out_raw.clone(),
            out_candidates: a.out_candidates.clone(),
        },
        Command::Perturb(a) => StageSpec::Perturb {
            moments: a.moments.clone(),
            out: a.out.clone(),
        },
        Command::Embed(a) => StageSpec::Embed {
            moments: a.moments.clone(),
            disturbed: a.disturbed.clone(),
            statics: a.statics.clone(),
            dynamics: a.dynamics.clone(),
            frames: a.frames.clone(),
            out_train: a.out_train.clone(),
            out_candidates: a.out_candidates.clone(),
        },
        Command::TrainEvaluator(a) => StageSpec::TrainEvaluator {
            train_embeddings: a.train_embeddings.clone(),
            out_model: a.out_model.clone(),
            out_trace: a.out_trace.clone(),
        },
        Command::Score(a) => StageSpec::Score {
            moments: a.moments.clone(),
            candidate_embeddings: a.candidate_embeddings.clone(),
            statics: a.statics.clone(),
            dynamics: a.dynamics.clone(),
            model: a.model.clone(),
            out: a.out.clone(),
        },
        Command::Select(a) => StageSpec::Select {
            scored: a.scored.clone(),
            out: a.out.clone(),
        },
        Command::Stats(a) => {
            let schema = a
                .schema
                .parse::<figpipe_core::model::io::DatasetSchema>()
                .map_err(|e| anyhow::anyhow!(e))?;
            StageSpec::Stats {
                input: a.input.clone(),
                schema,
                out: a.out.clone(),
            }
        }
        Command::EvalMetrics(a) => StageSpec::EvalMetrics {
            predictions: a.predictions.clone(),
            ground_truth: a.ground_truth.clone(),
            out: a.out.clone(),
        },
        Command::Config => {
            println!("{}", config.to_toml()?);
            return Ok(None);
        }
    };
    Ok(Some(spec))
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut config = load_config(&cli)?;
    if let Command::Select(a) = &cli.command {
        if let Some(threshold) = a.threshold {
            config.evaluator.threshold = Some(threshold);
            config.validate()?;
        }
    }
    let Some(spec) = spec_for(&cli.command, &config)? else {
        return Ok(0);
    };
    let ctx = StageContext::new(
        config,
        cli.seed,
        cli.workers,
        cli.force,
        cli.mock,
        cli.cache_dir.clone(),
    )?;
    let report = run_stage(&ctx, &spec)?;
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
