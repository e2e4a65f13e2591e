use std::path::PathBuf;
use std::process::ExitCode;

use cfdebias::classifier::Method;
use cfdebias::experiment::{ExperimentConfig, Pipeline, Stage, StageRecord, CONFIG_FILE};
use cfdebias::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfdebias", version, about = "Spurious-correlation counterfactual experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults to the stored config of
    /// `--out`, else the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no `--config` is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides the experiment seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Marks the run as deterministic (recorded in the config and manifest).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Erm,
    Dro,
    Detector,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Erm => Method::Erm,
            MethodArg::Dro => Method::Dro,
            MethodArg::Detector => Method::Detector,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and write manifest.csv plus images.
    Forge,
    /// Train the ERM or Group-DRO disease classifier, or the artifact detector.
    TrainClassifier {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Train a counterfactual bundle supervised by a classifier checkpoint.
    TrainCf {
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Generate counterfactuals for the test split and compute all metrics.
    Evaluate,
    /// Write tables, chart, panels and provenance from evaluation outputs.
    Report,
    /// Run every stage in order, resuming completed ones.
    RunAll,
}

fn resolve_config(c: &Common) -> Result<Option<ExperimentConfig>, Error> {
    let mut cfg = match (&c.config, c.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(Preset::Smoke)) => ExperimentConfig::smoke(0),
        (None, Some(Preset::Desk)) => ExperimentConfig::desk(0),
        (None, None) if c.out.join(CONFIG_FILE).exists() && c.seed.is_none() && !c.deterministic => return Ok(None),
        (None, None) if c.out.join(CONFIG_FILE).exists() => ExperimentConfig::load(&c.out.join(CONFIG_FILE))?,
        (None, None) => ExperimentConfig::desk(0),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    Ok(Some(cfg))
}

fn report(r: &StageRecord) {
    if r.resumed {
        eprintln!("{:<15} resumed ({:.1}s when run)", r.stage.as_str(), r.seconds);
    } else {
        eprintln!("{:<15} done in {:.1}s", r.stage.as_str(), r.seconds);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let pipeline = match resolve_config(&cli.common).map_err(|e| e.in_stage("config"))? {
        Some(cfg) => Pipeline::new(cfg, &cli.common.out),
        None => Pipeline::open(&cli.common.out),
    }
    .map_err(|e| e.in_stage("config"))?;
    match cli.command {
        Command::Forge => report(&pipeline.run_stage(Stage::Forge)?),
        Command::TrainClassifier { method } => {
            report(&pipeline.run_stage(Stage::for_classifier(method.into()))?)
        }
        Command::TrainCf { classifier } => report(&pipeline.run_counterfactual_with(&classifier)?),
        Command::Evaluate => report(&pipeline.run_stage(Stage::Evaluate)?),
        Command::Report => report(&pipeline.rerun_stage(Stage::Report)?),
        Command::RunAll => {
            let manifest = pipeline.run_all()?;
            manifest.stages.iter().for_each(report);
            let gap = std::fs::read_to_string(pipeline.stage_dir(Stage::Report).join("scls_gap.txt"))
                .map_err(|e| Error::io(pipeline.stage_dir(Stage::Report), e))?;
            println!("{}", gap.trim_end());
            println!("config hash {}", manifest.config_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cfdebias: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !e.to_string().contains(&s.to_string()) {
                    eprintln!("  caused by: {s}");
                }
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
