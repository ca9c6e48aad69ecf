use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sattn_core::{SharingPlan, Span};

#[derive(Debug, Parser)]
#[command(name = "sattn", version, about = "Shared-attention inference engine and analysis tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write deterministic random toy weights (manifest + .bin blob).
    MakeToy(MakeToyArgs),
    /// Generate a continuation of a prompt.
    Run(RunArgs),
    /// Perplexity of token streams.
    Ppl(PplArgs),
    /// Layer×layer attention similarity surface and layer groups.
    Sim(SimArgs),
    /// Per-layer, per-head attention variance and its weighted cumulative form.
    Var(VarArgs),
    /// Analytical flop / KV-cache budget for sharing plans.
    Budget(BudgetArgs),
    /// Equivalence checks: degenerate spans, cached decoding, cost reconciliation.
    Parity(ParityArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConfigFlags {
    #[arg(long, default_value_t = 8)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub n_kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    pub max_seq: usize,
    #[arg(long, default_value_t = 10000.0)]
    pub rope_theta: f32,
    #[arg(long, default_value_t = 1e-5)]
    pub norm_eps: f32,
}

/// Attention-sharing overrides applied on top of a model's stored config.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SharingFlags {
    /// Shared-attention span `a:b` (inclusive); repeatable. Replaces the stored plan.
    #[arg(long = "span", value_name = "A:B")]
    #[serde(serialize_with = "spans_as_strings")]
    pub spans: Vec<Span>,
    /// Pair every odd layer with the even layer below it for cross-layer KV sharing.
    #[arg(long)]
    pub cla_pairs: bool,
}

fn spans_as_strings<S: serde::Serializer>(spans: &[Span], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(spans.iter().map(Span::to_string))
}

fn plan_as_string<S: serde::Serializer>(plans: &[SharingPlan], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(plans.iter().map(SharingPlan::to_string))
}

#[derive(Debug, Args, Serialize)]
pub struct MakeToyArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Manifest path; the blob is written next to it with a `.bin` extension.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigFlags,
    #[command(flatten)]
    pub sharing: SharingFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt token file, one id per line.
    #[arg(long)]
    pub ids: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n_steps: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sharing: SharingFlags,
    /// JSON output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InputFlags {
    /// Single token file.
    #[arg(long, conflicts_with = "corpus")]
    pub ids: Option<PathBuf>,
    /// Directory of token files, one sample per file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PplArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub sharing: SharingFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleAgg {
    MeanMatrices,
    MeanSimilarities,
}

#[derive(Debug, Args, Serialize)]
pub struct SimArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub sharing: SharingFlags,
    /// `mean` or a head index.
    #[arg(long, default_value = "mean")]
    pub head: String,
    #[arg(long, value_enum, default_value_t = SampleAgg::MeanMatrices)]
    pub sample_agg: SampleAgg,
    /// Similarity threshold for layer grouping.
    #[arg(long, default_value_t = 0.8)]
    pub tau: f32,
    /// Output prefix; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VarArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub sharing: SharingFlags,
    /// Output prefix; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    Llama2_7b,
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetArgs {
    /// Take the architecture from this manifest instead of a preset.
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Layer count override for the preset.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Sequence lengths to tabulate; defaults to max_seq.
    #[arg(long = "seq-len")]
    pub seq_lens: Vec<usize>,
    /// Whole plan as comma-separated spans, e.g. `23:26,27:30`; repeatable.
    #[arg(long = "plan", value_parser = parse_plan)]
    #[serde(serialize_with = "plan_as_string")]
    pub plans: Vec<SharingPlan>,
    #[command(flatten)]
    pub sharing: SharingFlags,
    /// Output prefix; writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ParityArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Token file; defaults to a fixed pseudo-random stream of max_seq / 2 tokens.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    #[command(flatten)]
    pub sharing: SharingFlags,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_plan(s: &str) -> Result<SharingPlan, String> {
    let spans = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.parse::<Span>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    SharingPlan::new(spans).map_err(|e| e.to_string())
}
