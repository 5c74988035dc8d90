//! stylevec-core: checkpoint-parameter algebra for expressive style
//! composition.
//!
//! The crate operates directly on tensor checkpoint files; no model is
//! ever executed. It covers:
//!
//! - [`tensor`]: dense tensors (F32/F16/BF16) and the numeric kernels
//!   (elementwise difference, scaled accumulation, matmul, casts, norms);
//! - [`checkpoint`]: bit-exact safetensors reading/writing with canonical,
//!   deterministic output;
//! - [`taskvector`]: task-vector construction (fine-tuned minus base),
//!   coefficient scaling, application, and linear combination;
//! - [`lora`]: low-rank adapter algebra: materialization, squared-
//!   coefficient application, SVD extraction, variation-ranked targets;
//! - [`merge`]: fully and hierarchical merge strategies over a declarative
//!   recipe, with layer classification by model topology;
//! - [`analysis`]: directional-consistency, perturbation, per-layer
//!   statistics and linearity probes;
//! - [`fixtures`]: deterministic toy checkpoints with planted, ledgered
//!   deltas for testing;
//! - [`rng`]: the portable counter-based generator behind every random
//!   value;
//! - [`svd`]: deterministic one-sided Jacobi SVD.

pub mod analysis;
pub mod checkpoint;
pub mod fixtures;
pub mod lora;
pub mod merge;
pub mod rng;
pub mod svd;
pub mod taskvector;
pub mod tensor;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, validate_header, write_checkpoint,
    Checkpoint, CheckpointError, HeaderReport, TensorKey,
};
pub use lora::{apply_lora, extract_lora, rank_targets_by_variation, LoraAdapter, LoraError};
pub use merge::{
    classify_layer, compile_recipe, execute_plan, merge_full, merge_hierarchical, LayerClass,
    MergeError, MergeInput, MergePlan, MergeRecipe, ModelTopology,
};
pub use taskvector::{
    apply_evector, build_task_vector, combine_linear, scale_emotion_vector, scale_task_vector,
    EVector, KeyAlignmentPolicy, TaskVector, TaskVectorError, DEFAULT_BETA_MAX,
};
pub use tensor::{
    axpy, cast, elementwise_sub, frobenius_norm, matmul, ulp_spacing, Dtype, Tensor, TensorError,
};
