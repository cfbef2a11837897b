use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use synth_pipeline::{
    artifact_root, Experiment, ExperimentConfig, ExperimentManifest, PipelineError, Stage,
};

/// Per-organ diffusion synthesis of segmentation data, one stage at a time.
/// Artifacts go under $SYNTH_ARTIFACT_ROOT (default ./artifacts).
#[derive(Parser)]
#[command(name = "synth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Experiment seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment id; overrides the config.
    #[arg(long)]
    experiment: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    Ingest(StageArgs),
    TrainSsiAll(StageArgs),
    TrainAdapter(StageArgs),
    GenerateOrgans(StageArgs),
    Compose(StageArgs),
    Refine(StageArgs),
    EvaluateQuality(StageArgs),
    SegTrain(StageArgs),
    SegEval(StageArgs),
    /// Tables and figures from the latest runs.
    Report {
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every stage in order.
    All(StageArgs),
    /// Checks every recorded artifact against its hash.
    Verify {
        #[arg(long)]
        experiment: String,
    },
}

fn open(args: &StageArgs) -> Result<Experiment, PipelineError> {
    let config = ExperimentConfig::load(&args.config)?;
    Experiment::new(
        artifact_root(),
        config,
        args.seed,
        args.experiment.as_deref(),
    )
}

fn run() -> Result<(), PipelineError> {
    let cli = Cli::parse();
    let (exp, stage) = match cli.command {
        Command::Ingest(a) => (open(&a)?, Stage::Ingest),
        Command::TrainSsiAll(a) => (open(&a)?, Stage::TrainSsiAll),
        Command::TrainAdapter(a) => (open(&a)?, Stage::TrainAdapter),
        Command::GenerateOrgans(a) => (open(&a)?, Stage::GenerateOrgans),
        Command::Compose(a) => (open(&a)?, Stage::Compose),
        Command::Refine(a) => (open(&a)?, Stage::Refine),
        Command::EvaluateQuality(a) => (open(&a)?, Stage::EvaluateQuality),
        Command::SegTrain(a) => (open(&a)?, Stage::SegTrain),
        Command::SegEval(a) => (open(&a)?, Stage::SegEval),
        Command::Report {
            experiment,
            config,
            seed,
        } => {
            let exp = match (config, experiment) {
                (Some(c), id) => Experiment::new(
                    artifact_root(),
                    ExperimentConfig::load(&c)?,
                    seed,
                    id.as_deref(),
                )?,
                (None, Some(id)) => Experiment::open(artifact_root(), &id)?,
                (None, None) => {
                    return Err(PipelineError::Config {
                        path: "experiment".into(),
                        message: "report needs --experiment or --config".into(),
                    })
                }
            };
            (exp, Stage::Report)
        }
        Command::All(a) => {
            let exp = open(&a)?;
            for r in exp.run_all()? {
                println!(
                    "{}/run-{} ({} outputs, {:.1}s)",
                    r.stage,
                    r.run,
                    r.outputs.len(),
                    r.wall_time_s
                );
            }
            return Ok(());
        }
        Command::Verify { experiment } => {
            let dir = artifact_root().join(&experiment);
            let m = ExperimentManifest::load(&dir)?;
            m.verify(&dir)?;
            println!(
                "{} records, {} artifacts verified",
                m.records.len(),
                m.artifact_paths().len()
            );
            return Ok(());
        }
    };
    let r = exp.run(stage)?;
    println!(
        "{}/run-{} ({} outputs, {:.1}s)",
        r.stage,
        r.run,
        r.outputs.len(),
        r.wall_time_s
    );
    if stage == Stage::Report {
        println!("{}", exp.dir().join(r.dir()).join("report.md").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
