use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowcast_cli::config::ObjectiveKind;
use flowcast_cli::{AblationKind, Category, CliError, CliResult, Run, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "flowcast", version, about = "Latent flow matching for radar nowcasting")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Fraction of validation/test windows to use, in (0, 1].
    #[arg(long, global = true)]
    subset: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic events, windows and the split.
    Generate,
    /// Train the codec or a latent generative model.
    Train {
        #[command(subcommand)]
        kind: TrainKind,
    },
    /// Draw ensemble forecasts for the test windows.
    Forecast,
    /// Score the forecasts against the truth and the persistence baseline.
    Evaluate,
    /// Sweep sampler settings and chart quality against NFE.
    Ablate {
        #[command(subcommand)]
        kind: AblateKind,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum TrainKind {
    Vae,
    Cfm,
    Ddpm,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum AblateKind {
    Nfe,
    Solver,
    Objective,
}

fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(subset) = cli.subset {
        cfg.subset = subset;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = effective_config(&cli)?;
    let run = Run::new(cfg, cli.out);
    match cli.command {
        Command::Generate => run.generate()?,
        Command::Train { kind: TrainKind::Vae } => run.train_vae()?,
        Command::Train { kind: TrainKind::Cfm } => run.train_model(ObjectiveKind::Cfm)?,
        Command::Train { kind: TrainKind::Ddpm } => run.train_model(ObjectiveKind::Ddpm)?,
        Command::Forecast => {
            let label = run.forecast()?;
            println!("{}", run.forecast_dir(&label).display());
        }
        Command::Evaluate => {
            let label = run.evaluate()?;
            println!("{}", run.evaluate_dir(&label).display());
        }
        Command::Ablate { kind } => {
            let kind = match kind {
                AblateKind::Nfe => AblationKind::Nfe,
                AblateKind::Solver => AblationKind::Solver,
                AblateKind::Objective => AblationKind::Objective,
            };
            print!("{}", flowcast_cli::commands::ablation_csv(&run.ablate(kind)?));
        }
        Command::Config => print!("{}", run.config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Category::Usage, first).render());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::FAILURE
        }
    }
}
