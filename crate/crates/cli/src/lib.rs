//! Command-line front end for `diffgda`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "diffgda", version, about = "Guided graph diffusion for graph domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub source: Option<PathBuf>,

    #[arg(long, global = true)]
    pub target: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair.
    GenSynth,
    /// Train the score model on the source graph.
    TrainScore,
    /// Train the domain classifier and the guidance networks.
    TrainGuidance,
    /// Sample the intermediate graph.
    Generate,
    /// Train the target GCN on the generated graph.
    Adapt,
    /// Evaluate the trained GCN on the target graph.
    Eval,
    /// All stages end to end.
    Run,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::TrainScore => "train-score",
            Command::TrainGuidance => "train-guidance",
            Command::Generate => "generate",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Run => "run",
        }
    }
}

impl Cli {
    /// Config file, then `--set` overrides, then the dedicated flags.
    pub fn run_config(&self) -> anyhow::Result<config::RunConfig> {
        let mut overrides = Vec::new();
        for s in &self.set {
            let (k, v) = config::split_assignment(s)?;
            overrides.push((k.to_string(), v.to_string()));
        }
        let flags = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("source", self.source.as_ref().map(|p| p.display().to_string())),
            ("target", self.target.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        }
        config::parse_config(self.config.as_deref(), &overrides)
    }
}

pub fn dispatch(cmd: Command, cfg: &config::RunConfig) -> anyhow::Result<()> {
    match cmd {
        Command::GenSynth => commands::gen_synth(cfg),
        Command::TrainScore => commands::train_score(cfg),
        Command::TrainGuidance => commands::train_guidance(cfg),
        Command::Generate => commands::generate(cfg),
        Command::Adapt => commands::adapt(cfg),
        Command::Eval => commands::eval(cfg),
        Command::Run => commands::run(cfg),
    }
}
