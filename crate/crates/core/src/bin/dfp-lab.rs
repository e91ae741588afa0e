use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfp_lab::config::{ConfigError, ConfigIssue, ExperimentConfig, Overrides};
use dfp_lab::pipeline::{self, PipelineError, Stage};

/// Run the data-free perturbation experiment pipeline stage by stage.
#[derive(Parser)]
#[command(name = "dfp-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Without it every default applies.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Attack ids to run (dfp, fgsm, mifgsm, random); repeat or comma-separate.
    #[arg(long = "attack", global = true, value_delimiter = ',')]
    attacks: Vec<String>,
    /// L∞ budget in [-1, 1] pixel units, applied to the selected attacks.
    #[arg(long, global = true, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// forward or paper-literal.
    #[arg(long, global = true)]
    final_step: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source and target datasets.
    GenData,
    /// Train each architecture on the source domain.
    Pretrain,
    /// Fine-tune the pretrained models on the target domain, plus the from-scratch arm.
    Finetune,
    /// Craft adversarial sets for the target test split.
    Attack,
    /// Fooling rates, transfer matrix, mapping histograms and logits.
    Evaluate,
    /// Write the tables and report.json.
    Report,
    /// Every stage in order.
    FullRun,
    /// Print the normalised config, or every problem with it.
    ValidateConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let final_step = match &cli.final_step {
        None => None,
        Some(s) => Some(s.parse().map_err(|_| {
            ConfigError::Invalid(vec![ConfigIssue {
                path: "--final-step".into(),
                message: format!("expected forward or paper-literal, got {s:?}"),
            }])
        })?),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        attacks: (!cli.attacks.is_empty()).then(|| cli.attacks.clone()),
        epsilon: cli.epsilon,
        iterations: cli.iters,
        final_step,
    };
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::parse_with("", &overrides)?,
    };
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    let stages: Vec<Stage> = match cli.command {
        Command::ValidateConfig => {
            print!("{}", config.to_toml());
            return Ok(());
        }
        Command::FullRun => Stage::ALL.to_vec(),
        Command::GenData => vec![Stage::GenData],
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Finetune => vec![Stage::Finetune],
        Command::Attack => vec![Stage::Attack],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Report => vec![Stage::Report],
    };
    for stage in stages {
        let manifest = pipeline::run_stage(stage, &config)?;
        println!(
            "{stage}: {} artifacts, manifest {}",
            manifest.artifacts.len(),
            config.out_dir.join(stage.manifest_path()).display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
