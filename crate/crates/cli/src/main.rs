mod commands;
mod config;
mod error;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig, DEFAULT_OUT};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "laddermoe", version, about = "Ladder mixture-of-experts glyph recognition on a synthetic long-tailed corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "LADDERMOE_OUT")]
    out: Option<PathBuf>,
    /// Experts per adapter (0 disables the adapters).
    #[arg(long, global = true)]
    experts: Option<usize>,
    #[arg(long = "top-k", global = true)]
    top_k: Option<usize>,
    /// Comma-separated backbone layer indices carrying adapters.
    #[arg(long, global = true, value_delimiter = ',', num_args = 0..)]
    adapter_layers: Option<Vec<usize>>,
    /// Permutation masks per batch.
    #[arg(long, global = true)]
    permutations: Option<usize>,
    #[arg(long, global = true)]
    plm_epochs: Option<usize>,
    #[arg(long, global = true)]
    osf_epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Column-grouping threshold factor.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Data-parallel workers for generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for laddermoe::syndata::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => laddermoe::syndata::Split::Train,
            SplitArg::Val => laddermoe::syndata::Split::Val,
            SplitArg::Test => laddermoe::syndata::Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Experts,
    TopK,
    OsfEpochs,
    Permutations,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the corpus (rasters, manifest, splits) under OUT/corpus.
    Synth,
    /// Pretrain the backbone; writes OUT/pretrain.ckpt.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Permuted then ordered training of adapters and decoder.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pretrained backbone checkpoint (default OUT/pretrain.ckpt).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Continue an interrupted run from this checkpoint.
        #[arg(long, conflicts_with = "pretrained")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Single-character report on a crop split.
    EvalChar {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trained checkpoint (default OUT/checkpoints/final.ckpt).
        #[arg(long, conflicts_with = "predictions")]
        model: Option<PathBuf>,
        /// Score a predictions file instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Transcribe the pages of a split; writes OUT/transcriptions.jsonl.
    Transcribe {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Character boxes per page (default: ground truth).
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Page-level correct/accurate rates of a transcription file.
    EvalPage {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Default OUT/transcriptions.jsonl.
        #[arg(long)]
        transcriptions: Option<PathBuf>,
        /// Scored detections for an AP50 figure.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Expert-selection counts per adapter and category as CSV.
    AnalyzeExperts {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference gradient check on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Retrain and evaluate for each value along one axis.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::EvalChar { .. } => "eval-char",
            Command::Transcribe { .. } => "transcribe",
            Command::EvalPage { .. } => "eval-page",
            Command::AnalyzeExperts { .. } => "analyze-experts",
            Command::GradCheck { .. } => "grad-check",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut cfg = RunConfig::from_file(c.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: c.seed,
        workers: c.workers,
        lambda: c.lambda,
        experts: c.experts,
        top_k: c.top_k,
        adapter_layers: c.adapter_layers.clone(),
        permutations: c.permutations,
        plm_epochs: c.plm_epochs,
        osf_epochs: c.osf_epochs,
        batch_size: c.batch_size,
    });
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = commands::Context::new(cfg, out, cli.command.name())?;
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Pretrain { corpus } => commands::pretrain(ctx, corpus),
        Command::Train {
            corpus,
            pretrained,
            resume,
            max_epochs,
        } => commands::train(ctx, corpus, pretrained, resume, max_epochs),
        Command::EvalChar {
            corpus,
            model,
            predictions,
            split,
        } => commands::eval_char(ctx, corpus, model, predictions, split.into()),
        Command::Transcribe {
            corpus,
            model,
            boxes,
            split,
        } => commands::transcribe(ctx, corpus, model, boxes, split.into()),
        Command::EvalPage {
            corpus,
            transcriptions,
            detections,
            split,
        } => commands::eval_page(ctx, corpus, transcriptions, detections, split.into()),
        Command::AnalyzeExperts { corpus, model, split } => {
            commands::analyze_experts(ctx, corpus, model, split.into())
        }
        Command::GradCheck { eps, tol } => commands::grad_check(&ctx, eps, tol),
        Command::Ablate {
            corpus,
            pretrained,
            axis,
            values,
        } => commands::ablate(ctx, corpus, pretrained, axis, &values),
    }
}
