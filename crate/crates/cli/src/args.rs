use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::plot::{PlotKind, Stat};

#[derive(Debug, Parser)]
#[command(
    name = "massweights",
    version,
    about = "Find, attack and regularize massive weights in gated-FFN transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random (optionally planted) toy checkpoint.
    Init(InitArgs),
    /// Write a synthetic Markov token stream or multiple-choice item file.
    Synth(SynthArgs),
    /// Full-parameter pretraining of a toy checkpoint on a token stream.
    Pretrain(PretrainArgs),
    /// Record per-layer hidden-state magnitudes as CSV (and optionally SVG).
    Trace(TraceArgs),
    /// Locate the massive layer and its top-k massive weights from bos.
    Detect(DetectArgs),
    /// Apply top-k zeroing or retaining and write the attacked checkpoint.
    Attack(AttackArgs),
    /// Perplexity or multiple-choice accuracy, optionally under attack.
    Eval(EvalArgs),
    /// LoRA fine-tuning with or without MacDrop.
    Train(TrainArgs),
    /// Render a CSV artifact as an SVG line plot.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArg {
    /// Weight file or checkpoint directory. Relative paths that do not
    /// exist are looked up under $MASSW_CHECKPOINT_DIR, which is also the
    /// default when the flag is omitted.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F16,
    Bf16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum RuleArg {
    #[default]
    #[value(name = "global_argmax", alias = "global-argmax")]
    GlobalArgmax,
    #[value(name = "first_explosion", alias = "first-explosion")]
    FirstExplosion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackKindArg {
    Zeroing,
    Retaining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum MetricArg {
    #[default]
    Perplexity,
    #[value(name = "mc_accuracy", alias = "mc-accuracy")]
    McAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum NormArg {
    #[default]
    Sum,
    #[value(name = "per_token", alias = "per-token")]
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ScheduleArg {
    #[default]
    Step,
    #[value(name = "epoch-before", alias = "epoch_before")]
    EpochBefore,
    #[value(name = "epoch-after", alias = "epoch_after")]
    EpochAfter,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Stream,
    Items,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 257)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 172)]
    pub ffn: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Make even layers top-2 MoE layers with this many experts.
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    /// Plant massive weights at this 1-based layer.
    #[arg(long, requires = "plant_rows")]
    pub plant_layer: Option<usize>,
    /// Planted rows, largest first.
    #[arg(long, value_delimiter = ',', requires = "plant_layer")]
    pub plant_rows: Vec<usize>,
    #[arg(long, requires = "plant_layer")]
    pub plant_expert: Option<usize>,
    #[arg(long, default_value_t = 1000.0)]
    pub plant_scale: f64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "stream")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 257)]
    pub vocab: usize,
    /// Defaults to the last id, as in toy checkpoints.
    #[arg(long)]
    pub bos: Option<u32>,
    #[arg(long, default_value_t = 4)]
    pub branching: usize,
    /// Seed of the transition table; streams sharing it share a language.
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
    /// Seed of the sampled documents or items.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub docs: usize,
    #[arg(long, default_value_t = 256)]
    pub len: usize,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 16)]
    pub context: usize,
    #[arg(long, default_value_t = 4)]
    pub span: usize,
    #[arg(long, default_value_t = 4)]
    pub options: usize,
    /// Write the stream in the binary format instead of JSON lines.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, value_name = "PATH")]
    pub stream: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines loss log: {step, loss}.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    /// Comma-separated input ids. Defaults to the bos token alone.
    #[arg(long, value_delimiter = ',', conflicts_with = "stream")]
    pub ids: Vec<u32>,
    /// Token stream whose first `--len` ids are traced.
    #[arg(long, value_name = "PATH")]
    pub stream: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub len: usize,
    /// Position whose states are recorded.
    #[arg(long, default_value_t = 0)]
    pub position: usize,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub svg: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "top1")]
    pub stat: Stat,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "global_argmax")]
    pub rule: RuleArg,
    /// Report path. Printed to stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, value_enum)]
    pub kind: AttackKindArg,
    #[arg(long, required_unless_present = "k_list", conflicts_with = "k_list")]
    pub k: Option<usize>,
    /// Comma-separated sizes; each writes `<out stem>.k<K>.<ext>`.
    #[arg(long, value_delimiter = ',', conflicts_with = "in_place")]
    pub k_list: Vec<usize>,
    /// Detection report to attack. Detected from bos when omitted.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "global_argmax")]
    pub rule: RuleArg,
    /// Overwrite the input checkpoint.
    #[arg(long, conflicts_with = "out", required_unless_present = "out")]
    pub in_place: bool,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, value_enum, default_value = "perplexity")]
    pub metric: MetricArg,
    #[arg(long, value_name = "PATH", required_if_eq("metric", "perplexity"))]
    pub stream: Option<PathBuf>,
    #[arg(long, value_name = "PATH", required_if_eq("metric", "mc_accuracy"))]
    pub items: Option<PathBuf>,
    #[arg(long, default_value_t = massweights::eval::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = massweights::eval::DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, value_enum, default_value = "sum")]
    pub normalization: NormArg,
    /// LoRA adapters applied on top of the (attacked) base weights.
    #[arg(long, value_name = "PATH")]
    pub adapters: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub attack: Option<AttackKindArg>,
    #[arg(long, requires = "attack", conflicts_with = "k_list")]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',', requires = "attack")]
    pub k_list: Vec<usize>,
    #[arg(long, value_enum, default_value = "global_argmax")]
    pub rule: RuleArg,
    /// Dataset name recorded in the report. Defaults to the input file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Report path. Printed to stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Sweep table `series,k,value` for `plot --kind metric_by_k`.
    #[arg(long, value_name = "PATH", requires = "k_list")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_name = "PATH", default_value = "runs.csv")]
    pub ledger: PathBuf,
    #[arg(long, conflicts_with = "ledger")]
    pub no_ledger: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long, value_name = "PATH")]
    pub train: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub val: PathBuf,
    #[arg(long, value_enum, default_value = "step")]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 0.8)]
    pub p0: f64,
    /// Rate of the exponential schedule.
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 256)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_ratio: f64,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 16.0)]
    pub lora_alpha: f64,
    /// Baseline arm: plain LoRA without massive-weight dropout.
    #[arg(long)]
    pub no_macdrop: bool,
    /// Scale kept massive entries by 1 / (1 - p).
    #[arg(long, conflicts_with = "no_macdrop")]
    pub rescale: bool,
    /// One keep decision per massive row instead of per element.
    #[arg(long, conflicts_with = "no_macdrop")]
    pub per_row: bool,
    #[arg(long, value_name = "PATH")]
    pub out_adapters: Option<PathBuf>,
    /// Merge the adapters into the base weights and write them to `--out`.
    #[arg(long, requires = "out")]
    pub merge: bool,
    #[arg(long, value_name = "PATH", requires = "merge")]
    pub out: Option<PathBuf>,
    /// JSON-lines metrics log: {step, epoch, p, loss, kept_fraction}.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// The same log as CSV, for `plot --kind p_by_step`.
    #[arg(long, value_name = "PATH")]
    pub log_csv: Option<PathBuf>,
    #[arg(long, value_name = "PATH", default_value = "runs.csv")]
    pub ledger: PathBuf,
    #[arg(long, conflicts_with = "ledger")]
    pub no_ledger: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_name = "PATH")]
    pub from: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "magnitude_by_layer")]
    pub kind: PlotKind,
    /// Statistic drawn by `magnitude_by_layer`.
    #[arg(long, value_enum, default_value = "top1")]
    pub stat: Stat,
}
