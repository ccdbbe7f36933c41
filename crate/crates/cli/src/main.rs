//! `styleinv`: command-line front end for training and using the inversion
//! encoders.
//!
//! Every command resolves a [`RunConfig`] from built-in defaults, an optional
//! `--config` file, `--set section.key=value` overrides and finally the
//! command's own flags, and writes that resolved configuration next to its
//! outputs.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "styleinv", version, about = "Encoder inversion for a style-modulated radiance-field generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialise a frozen generator and write its checkpoint.
    MakeGenerator(commands::MakeGenerator),
    /// Render a multi-view synthetic data set or the real-image pool to PNGs.
    GenData(commands::GenData),
    /// Train the base and refining encoders.
    Train(commands::Train),
    /// Invert one image and optionally render it at a sweep of yaws.
    Invert(commands::Invert),
    /// Render a sampled or stored latent at a pose.
    Render(commands::Render),
    /// Reconstruction, invariance and novel-view metrics of a trained encoder.
    Evaluate(commands::Evaluate),
    /// Train and evaluate several ablation variants with shared seeds.
    Ablate(commands::Ablate),
    /// Latent optimisation and pivotal tuning for one image.
    Optimize(commands::Optimize),
    /// Loss-curve and invariance-ratio plots from a training log.
    Report(report::Report),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeGenerator(c) => c.run(),
        Command::GenData(c) => c.run(),
        Command::Train(c) => c.run(),
        Command::Invert(c) => c.run(),
        Command::Render(c) => c.run(),
        Command::Evaluate(c) => c.run(),
        Command::Ablate(c) => c.run(),
        Command::Optimize(c) => c.run(),
        Command::Report(c) => c.run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
