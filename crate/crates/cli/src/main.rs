mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treeprompt::injection::PromptMode;

#[derive(Parser, Debug)]
#[command(name = "treeprompt", version, about = "Tree-structured prompts for a frozen grounding model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// RNG seed; required unless set in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $TREEPROMPT_OUT or runs/<timestamp>].
    #[arg(long, global = true, env = "TREEPROMPT_OUT")]
    pub out: Option<PathBuf>,
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub prompt_mode: Option<PromptMode>,
    /// Disable tree composition (per-token prompts in sentence order).
    #[arg(long, global = true)]
    pub no_tree: bool,
    /// Use one shared module instead of Leaf/Rel/Enti.
    #[arg(long, global = true)]
    pub no_modules: bool,
    /// Global prompt length N.
    #[arg(long, global = true)]
    pub prompt_len: Option<usize>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a CoNLL-U file, drop punctuation and report module routing.
    Parse {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate the synthetic grounding dataset.
    GenData,
    /// Pretrain and freeze the backbone on simple queries.
    PretrainBackbone {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tune prompts against the frozen backbone.
    Tune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Pretuned global multi-layer prompt checkpoint (multi mode).
        #[arg(long)]
        global: Option<PathBuf>,
    },
    /// Evaluate a tuned prompt on one split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Output directory of a `tune` run.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value = "tune_test_compositional")]
        split: String,
    },
    /// Tree × module ablation over seeds plus the prompt-length sweep.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Export the per-node reasoning trace of one example.
    Inspect {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        example: String,
    },
    /// Finite-difference check of the prompt builder's gradients.
    GradCheck,
    /// Render a `step,loss_A,loss_B` CSV as an SVG chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Smoothing window in steps.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

/// Validation problems exit with 1, everything else with 2.
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
