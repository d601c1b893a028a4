use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use crossfi::config::{Metric, Scenario, TemplateMethod};
use crossfi::encoder::EncoderVariant;
use crossfi::losses::Alpha;

#[derive(Debug, Parser)]
#[command(name = "crossfi", version, about = "Cross-domain CSI classification with a siamese attention network and adaptive templates")]
pub struct Cli {
    /// Seed; overrides the config file's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (output file for `plot`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// TOML config: a scenario config for train/ablate, a domain list for synth.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Convert a WiGesture-style capture tree into the session format.
    ConvertWigesture(ConvertArgs),
    /// Train one scenario and evaluate it.
    Train(TrainArgs),
    /// Re-evaluate a finished run directory.
    Eval(EvalArgs),
    /// Run the metric and template-method grid.
    Ablate(AblateArgs),
    /// Render accuracy-vs-shots charts from ablation tables.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub domains: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Windows per class and domain.
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub subcarriers: Option<usize>,
    /// Packets per window.
    #[arg(long)]
    pub packets: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Packets per second.
    #[arg(long)]
    pub sample_rate: Option<f64>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    /// Interference bursts per second (0 disables).
    #[arg(long, allow_negative_numbers = true)]
    pub interference_rate: Option<f64>,
    /// Disable the within-session gain, amplitude and phase drift.
    #[arg(long)]
    pub no_drift: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Root of a `<domain>/<class>/*.csv` tree.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub period_ms: u64,
    /// Keep only the first N complex values per packet.
    #[arg(long)]
    pub subcarriers: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub packets: usize,
    #[arg(long, default_value_t = 50)]
    pub stride: usize,
    /// Divisor bringing capture timestamps to milliseconds.
    #[arg(long, default_value_t = 1000.0)]
    pub timestamp_divisor: f64,
}

/// Flags layered over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub template_method: Option<TemplateMethod>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub use_mmd: bool,
    #[arg(long)]
    pub use_unlabeled_target: bool,
    /// Positive-pair weight: `auto` or a positive number.
    #[arg(long)]
    pub alpha: Option<Alpha>,
    #[arg(long, allow_negative_numbers = true)]
    pub mmd_weight: Option<f64>,
    #[arg(long)]
    pub mmd_kernels: Option<usize>,
    /// Target domain index; repeatable.
    #[arg(long = "target-domain")]
    pub target_domains: Vec<usize>,
    #[arg(long)]
    pub new_class: Option<usize>,
    /// Template pool size.
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    pub encoder: Option<EncoderVariant>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Save a checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset manifest; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Shot counts to sweep (k-shot and new-class scenarios).
    #[arg(long, value_delimiter = ',')]
    pub shots: Vec<usize>,
    /// Seeds per grid cell.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Add an in-domain run as the reference line for `plot`.
    #[arg(long)]
    pub with_in_domain: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Ablation tables; repeatable.
    #[arg(long = "table", required = true)]
    pub tables: Vec<PathBuf>,
    #[arg(long, default_value = "Accuracy vs. shots")]
    pub title: String,
}

fn parse_variant(s: &str) -> Result<EncoderVariant, String> {
    match s {
        "tiny" | "tiny-residual" => Ok(EncoderVariant::TinyResidual),
        "resnet18" | "paper-resnet18" => Ok(EncoderVariant::PaperResnet18),
        other => Err(format!("unknown encoder `{other}` (tiny, paper-resnet18)")),
    }
}
