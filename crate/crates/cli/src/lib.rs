//! Command-line pipeline: each subcommand is one stage reading and writing
//! files under the configured work directories.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::PipelineConfig;
use stages::Stage;

#[derive(Debug, Parser)]
#[command(name = "geoharvest", version, about = "Harvest geometry axioms from textbooks and solve problems with them")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set align.mode=hard`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its gold annotations.
    Synth,
    /// Train the axiom identification model.
    TrainIdent,
    /// Train the alignment model.
    TrainAlign,
    /// Refine both models jointly.
    TrainJoint,
    /// Train the mention split model.
    TrainSplit,
    /// Tag and align every book.
    Decode,
    /// Parse aligned mentions into rule beams.
    Parse,
    /// Fuse parses into one rule per axiom.
    Fuse,
    /// Answer geometry problems with the rule base.
    Solve {
        /// Rule file to use instead of the fused output.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Problem file or directory.
        #[arg(long)]
        problems: Option<PathBuf>,
    },
    /// Score whichever predictions exist against gold.
    Eval,
    /// Retrain with each feature group removed and report metrics.
    Ablate {
        /// Feature groups to ablate one at a time.
        groups: Vec<String>,
    },
    /// Print the resolved configuration.
    Config,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let stage = match cli.command {
        Command::Synth => Stage::Synth,
        Command::TrainIdent => Stage::TrainIdent,
        Command::TrainAlign => Stage::TrainAlign,
        Command::TrainJoint => Stage::TrainJoint,
        Command::TrainSplit => Stage::TrainSplit,
        Command::Decode => Stage::Decode,
        Command::Parse => Stage::Parse,
        Command::Fuse => Stage::Fuse,
        Command::Eval => Stage::Eval,
        Command::Solve { rules, problems } => {
            if problems.is_some() {
                cfg.paths.problems = problems;
            }
            stages::solve_stage(&cfg, rules.as_deref())?;
            return Ok(());
        }
        Command::Ablate { groups } => {
            stages::ablate_stage(&cfg, &groups)?;
            return Ok(());
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    let manifest = stages::run_stage(stage, &cfg)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}
