//! Command-line surface. One verb per operation keeps recipes scriptable.

use std::num::NonZeroUsize;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "stylevec",
    version,
    about = "Checkpoint-parameter algebra: task vectors, LoRA adapters, layer-wise merges, and parameter-space probes"
)]
pub struct Cli {
    /// Suppress human-readable output (errors still go to stderr).
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Emit a single machine-readable JSON document to stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Worker threads for per-tensor parallelism. Defaults to
    /// STYLEVEC_THREADS, then to the number of CPUs. Output bytes are
    /// identical for any thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a task vector: fine-tuned checkpoint minus base checkpoint.
    Diff(DiffArgs),
    /// Apply a scaled task vector to a base checkpoint.
    Apply(ApplyArgs),
    /// Materialize a scaled copy of a task vector.
    Scale(ScaleArgs),
    /// Run a merge recipe (full or hierarchical).
    Merge(MergeArgs),
    /// Extract a low-rank adapter from a task vector by truncated SVD.
    LoraExtract(LoraExtractArgs),
    /// Apply a LoRA adapter: W = W_pre + alpha^2 * B * A per target.
    LoraApply(LoraApplyArgs),
    /// Inspect a checkpoint header, layout violations, and layer stats.
    Inspect(InspectArgs),
    /// Pairwise cosine similarity between task vectors.
    Cosine(CosineArgs),
    /// Add seeded Gaussian noise to selected tensors.
    Perturb(PerturbArgs),
    /// Measure how linearly a fine-tuning trajectory approaches its end.
    Linearity(LinearityArgs),
    /// Generate a deterministic toy checkpoint (and optional styled variant).
    GenFixture(GenFixtureArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Diff(_) => "diff",
            Command::Apply(_) => "apply",
            Command::Scale(_) => "scale",
            Command::Merge(_) => "merge",
            Command::LoraExtract(_) => "lora-extract",
            Command::LoraApply(_) => "lora-apply",
            Command::Inspect(_) => "inspect",
            Command::Cosine(_) => "cosine",
            Command::Perturb(_) => "perturb",
            Command::Linearity(_) => "linearity",
            Command::GenFixture(_) => "gen-fixture",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PolicyArg {
    Strict,
    Intersect,
}

#[derive(Args, Debug)]
pub struct DiffArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub finetuned: PathBuf,
    /// Pre-trained base checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Output task-vector file.
    #[arg(long)]
    pub out: PathBuf,
    /// Key alignment policy.
    #[arg(long, value_enum, default_value = "strict")]
    pub policy: PolicyArg,
    /// Identifier recorded for the base (defaults to the file stem).
    #[arg(long)]
    pub base_id: Option<String>,
    /// Identifier recorded for the fine-tuned model (defaults to the stem).
    #[arg(long)]
    pub finetuned_id: Option<String>,
    /// Validate and report without writing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Task-vector file to apply.
    #[arg(long)]
    pub vector: PathBuf,
    /// Scaling coefficient.
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Treat alpha as an emotion strength: enforce 0 <= alpha <= beta-max.
    #[arg(long)]
    pub emotion: bool,
    /// Ceiling for the emotion strength coefficient.
    #[arg(long, default_value_t = stylevec_core::DEFAULT_BETA_MAX)]
    pub beta_max: f64,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    #[arg(long)]
    pub vector: PathBuf,
    /// Coefficient to fold into the stored vector.
    #[arg(long)]
    pub coeff: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Enforce the emotion-strength range on the coefficient.
    #[arg(long)]
    pub emotion: bool,
    #[arg(long, default_value_t = stylevec_core::DEFAULT_BETA_MAX)]
    pub beta_max: f64,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Merge recipe (JSON).
    #[arg(long)]
    pub recipe: PathBuf,
    /// Compile and print the plan without writing the output.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct LoraExtractArgs {
    /// Task-vector file to factor.
    #[arg(long)]
    pub vector: PathBuf,
    /// Adapter rank.
    #[arg(long)]
    pub rank: NonZeroUsize,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated target keys.
    #[arg(long, value_delimiter = ',', conflicts_with = "top")]
    pub targets: Vec<String>,
    /// Pick the N keys with the largest relative variation (needs --base).
    #[arg(long, requires = "base")]
    pub top: Option<usize>,
    /// Base checkpoint for variation ranking.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct LoraApplyArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter file.
    #[arg(long)]
    pub adapter: PathBuf,
    /// Enhancement coefficient; the applied scale is alpha^2.
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint, task-vector, or adapter file.
    #[arg(long)]
    pub file: PathBuf,
    /// Base checkpoint: adds per-layer variation stats, treating FILE as a
    /// task vector.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Topology JSON for grouping stats by layer class.
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CosineArgs {
    /// Two or more task-vector files.
    #[arg(long, num_args = 2.., required = true)]
    pub vectors: Vec<PathBuf>,
    /// Also report one cosine matrix per tensor key.
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ClassArg {
    TextEmbedding,
    Early,
    Late,
    Other,
}

impl ClassArg {
    pub fn to_class(self) -> stylevec_core::LayerClass {
        match self {
            ClassArg::TextEmbedding => stylevec_core::LayerClass::TextEmbedding,
            ClassArg::Early => stylevec_core::LayerClass::EarlyBlock,
            ClassArg::Late => stylevec_core::LayerClass::LateBlock,
            ClassArg::Other => stylevec_core::LayerClass::Other,
        }
    }
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    pub file: PathBuf,
    /// Noise standard deviation.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated keys to perturb.
    #[arg(long, value_delimiter = ',', conflicts_with = "class")]
    pub keys: Vec<String>,
    /// Perturb every key of one layer class instead.
    #[arg(long, value_enum)]
    pub class: Option<ClassArg>,
    /// Topology JSON for --class (defaults to the fixture grammar).
    #[arg(long)]
    pub topology: Option<PathBuf>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct LinearityArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Trajectory checkpoints, at least three, ending at the final model.
    #[arg(long, num_args = 3.., required = true)]
    pub trajectory: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DtypeArg {
    F32,
    F16,
    Bf16,
}

impl DtypeArg {
    pub fn to_dtype(self) -> stylevec_core::Dtype {
        match self {
            DtypeArg::F32 => stylevec_core::Dtype::F32,
            DtypeArg::F16 => stylevec_core::Dtype::F16,
            DtypeArg::Bf16 => stylevec_core::Dtype::BF16,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenFixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub embed: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Also write a styled variant with planted deltas.
    #[arg(long, requires = "magnitude")]
    pub variant_out: Option<PathBuf>,
    /// Per-tensor Frobenius norm of the planted deltas.
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// Layer class receiving the deltas.
    #[arg(long, value_enum, default_value = "early")]
    pub variant_class: ClassArg,
    /// Seed for the planted deltas (defaults to seed + 1).
    #[arg(long)]
    pub variant_seed: Option<u64>,
    /// Style label recorded in the variant ledger.
    #[arg(long, default_value = "styled")]
    pub style_label: String,
    #[arg(long)]
    pub dry_run: bool,
}
