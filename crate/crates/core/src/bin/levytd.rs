//! Experiment CLI: `levytd run` trains one configuration and writes its
//! artifacts; `levytd sweep` repeats a run across the values of one
//! configuration axis.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use levytd::cli::{self, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "levytd", version, about = "PIDE solver experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes metrics.csv, trajectories.csv,
    /// summary.txt.
    Run(RunArgs),
    /// Run one configuration per value of an axis; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem name: pure_jump_1d | robustness_1d | highdim.
    #[arg(long)]
    problem: Option<String>,
    /// Spatial dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Trajectory count.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Time-interval count.
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// TD window size k; must divide N.
    #[arg(long = "td-step")]
    td_step: Option<usize>,
    /// Horizon T.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Poisson jump intensity λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Jump law: normal | uniform | exponential | bernoulli | constant.
    #[arg(long)]
    jump: Option<String>,
    /// Comma-separated law parameters, e.g. 0.4,0.25.
    #[arg(long = "jump-params")]
    jump_params: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long = "lr-drop-every")]
    lr_drop_every: Option<usize>,
    #[arg(long = "lr-drop-factor")]
    lr_drop_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $LEVYTD_OUT or the working directory).
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
    #[arg(long = "log-every")]
    log_every: Option<usize>,
    /// Sample-path count for trajectories.csv.
    #[arg(long)]
    paths: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        macro_rules! apply {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    config.set_field($key, &v.to_string())?;
                })*
            };
        }
        apply! {
            problem => "problem",
            d => "d",
            m => "M",
            n => "N",
            iterations => "iterations",
            td_step => "td_step",
            horizon => "T",
            lambda => "lambda",
            jump => "jump",
            jump_params => "jump_params",
            epsilon => "epsilon",
            theta => "theta",
            lr0 => "lr0",
            lr_drop_every => "lr_drop_every",
            lr_drop_factor => "lr_drop_factor",
            seed => "seed",
            log_every => "log_every",
            paths => "paths",
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// RunConfig field to vary, e.g. lambda or td_step.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis; may be empty.
    #[arg(long, default_value = "")]
    values: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => args.config.build().and_then(|config| {
            let summary = cli::run(&config)?;
            println!(
                "problem {} finished: Y0 = {:.6} (exact {:.6}), relative error {:.4}%, {} updates in {:.1}s",
                config.problem,
                summary.final_y0,
                summary.exact_y0,
                summary.rel_error * 100.0,
                summary.updates,
                summary.seconds,
            );
            Ok(())
        }),
        Command::Sweep(args) => args.config.build().and_then(|config| {
            let values: Vec<String> = args
                .values
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            let path = cli::sweep(&config, &args.axis, &values)?;
            println!("sweep over {} finished: {}", args.axis, path.display());
            Ok(())
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
