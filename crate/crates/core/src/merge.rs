//! Cross-style composition: fully merging and hierarchical merging, driven
//! by a declarative recipe and a model-topology description.
//!
//! The hierarchical strategy routes the dialect input to the text-embedding
//! layer plus the early half of the transformer blocks and the emotion
//! input to the latter half; keys of an input that fall outside its
//! assigned classes are dropped with a report, never applied. The fully
//! merging strategy sums every scaled delta into the base across all
//! layers. Contributions accumulate per element in f32 in recipe order, so
//! the result is bit-deterministic regardless of scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, Checkpoint, CheckpointError, TensorKey};
use crate::lora::{materialize_against, LoraAdapter, LoraError};
use crate::taskvector::{TaskVector, TaskVectorError};
use crate::tensor::{accumulate_scaled, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("invalid recipe: {0}")]
    SchemaError(String),
    #[error("recipe input {0} does not exist: {1}")]
    MissingInput(usize, PathBuf),
    #[error("{0}")]
    RoleViolation(String),
    #[error("no base key matches the block pattern {0:?}")]
    TopologyMismatch(String),
    #[error("key {key:?} captures block index {index}, outside [0, {n_blocks})")]
    BlockIndexOutOfRange {
        key: String,
        index: u64,
        n_blocks: usize,
    },
    #[error("input {input}: key {key:?} not present in the base checkpoint")]
    KeyNotInBase { input: usize, key: String },
    #[error("input {input}: key {key:?}: {source}")]
    Tensor {
        input: usize,
        key: String,
        source: TensorError,
    },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input {0}: {1}")]
    Lora(usize, LoraError),
    #[error("input {0}: {1}")]
    Vector(usize, TaskVectorError),
}

// ---------------------------------------------------------------------------
// Topology and layer classification
// ---------------------------------------------------------------------------

/// Structural description of the model: which keys are transformer blocks
/// (one integer capture), which are the text embedding, and where the
/// early/late boundary sits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelTopology {
    pub block_pattern: String,
    pub n_blocks: usize,
    pub embedding_patterns: Vec<String>,
    /// Optional override for the early/late boundary; default is
    /// `n_blocks / 2` (the middle block of an odd count goes late).
    pub split_index: Option<usize>,
    #[serde(skip)]
    block_prefix: String,
    #[serde(skip)]
    block_suffix: String,
}

impl ModelTopology {
    pub fn new(
        block_pattern: impl Into<String>,
        n_blocks: usize,
        embedding_patterns: Vec<String>,
        split_index: Option<usize>,
    ) -> Result<ModelTopology, MergeError> {
        let block_pattern = block_pattern.into();
        let captures = block_pattern.matches("{i}").count();
        if captures != 1 {
            return Err(MergeError::InvalidTopology(format!(
                "block pattern {block_pattern:?} must contain exactly one {{i}} capture, found {captures}"
            )));
        }
        if n_blocks == 0 {
            return Err(MergeError::InvalidTopology(
                "n_blocks must be positive".into(),
            ));
        }
        if let Some(split) = split_index {
            if split > n_blocks {
                return Err(MergeError::InvalidTopology(format!(
                    "split_index {split} exceeds n_blocks {n_blocks}"
                )));
            }
        }
        let (prefix, suffix) = block_pattern
            .split_once("{i}")
            .expect("checked for exactly one capture");
        if prefix.is_empty() {
            return Err(MergeError::InvalidTopology(
                "block pattern must not start with the capture".into(),
            ));
        }
        // A key must never match both an embedding pattern and the block
        // pattern; prefix containment between the two makes that possible.
        for emb in &embedding_patterns {
            if emb.starts_with(prefix) || prefix.starts_with(emb.as_str()) {
                return Err(MergeError::InvalidTopology(format!(
                    "embedding pattern {emb:?} and block pattern {block_pattern:?} can match the same key"
                )));
            }
        }
        Ok(ModelTopology {
            block_prefix: prefix.to_string(),
            block_suffix: suffix.to_string(),
            block_pattern,
            n_blocks,
            embedding_patterns,
            split_index,
        })
    }

    /// First block index belonging to the late half.
    pub fn early_boundary(&self) -> usize {
        self.split_index.unwrap_or(self.n_blocks / 2)
    }

    /// Captures the block index if `key` matches the block pattern.
    fn capture_block_index(&self, key: &str) -> Option<u64> {
        let rest = key.strip_prefix(self.block_prefix.as_str())?;
        let digits: usize = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            return None;
        }
        let (num, tail) = rest.split_at(digits);
        if !tail.starts_with(self.block_suffix.as_str()) {
            return None;
        }
        num.parse::<u64>().ok()
    }
}

/// Which region of the network a key belongs to. Total over (key, topology).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    TextEmbedding,
    EarlyBlock,
    LateBlock,
    Other,
}

impl LayerClass {
    pub fn name(self) -> &'static str {
        match self {
            LayerClass::TextEmbedding => "text_embedding",
            LayerClass::EarlyBlock => "early_block",
            LayerClass::LateBlock => "late_block",
            LayerClass::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<LayerClass> {
        match s {
            "text_embedding" | "text-embedding" | "embedding" => Some(LayerClass::TextEmbedding),
            "early_block" | "early-block" | "early" => Some(LayerClass::EarlyBlock),
            "late_block" | "late-block" | "late" => Some(LayerClass::LateBlock),
            "other" => Some(LayerClass::Other),
            _ => None,
        }
    }
}

/// Classifies a key: embedding patterns win, then block keys split at the
/// early/late boundary, everything else is `Other`.
pub fn classify_layer(key: &TensorKey, topology: &ModelTopology) -> Result<LayerClass, MergeError> {
    if topology
        .embedding_patterns
        .iter()
        .any(|p| key.as_str().starts_with(p.as_str()))
    {
        return Ok(LayerClass::TextEmbedding);
    }
    if let Some(index) = topology.capture_block_index(key.as_str()) {
        if index >= topology.n_blocks as u64 {
            return Err(MergeError::BlockIndexOutOfRange {
                key: key.as_str().to_string(),
                index,
                n_blocks: topology.n_blocks,
            });
        }
        return Ok(if index < topology.early_boundary() as u64 {
            LayerClass::EarlyBlock
        } else {
            LayerClass::LateBlock
        });
    }
    Ok(LayerClass::Other)
}

// ---------------------------------------------------------------------------
// Merge inputs and execution
// ---------------------------------------------------------------------------

/// One contribution to a merge: a full task vector or a LoRA adapter with
/// its coefficient. Full vectors scale by the coefficient; adapters by the
/// coefficient squared.
#[derive(Debug, Clone)]
pub enum MergeInput {
    Vector {
        vector: TaskVector,
        coefficient: f64,
    },
    Adapter {
        adapter: LoraAdapter,
        coefficient: f64,
    },
}

impl MergeInput {
    pub fn coefficient(&self) -> f64 {
        match self {
            MergeInput::Vector { coefficient, .. } => *coefficient,
            MergeInput::Adapter { coefficient, .. } => *coefficient,
        }
    }

    /// Effective per-element scale applied to the materialized delta.
    pub fn effective_scale(&self) -> f64 {
        match self {
            MergeInput::Vector { coefficient, .. } => *coefficient,
            MergeInput::Adapter { coefficient, .. } => coefficient * coefficient,
        }
    }

    /// Dense deltas in the base's dtype and shape, keyed like the base.
    fn deltas(
        &self,
        base: &Checkpoint,
        input: usize,
    ) -> Result<BTreeMap<TensorKey, Tensor>, MergeError> {
        match self {
            MergeInput::Vector { vector, .. } => {
                let mut out = BTreeMap::new();
                for (key, delta) in vector.entries() {
                    if !base.contains(key) {
                        return Err(MergeError::KeyNotInBase {
                            input,
                            key: key.as_str().to_string(),
                        });
                    }
                    out.insert(key.clone(), delta.clone());
                }
                Ok(out)
            }
            MergeInput::Adapter { adapter, .. } => {
                materialize_against(base, adapter).map_err(|e| match e {
                    LoraError::KeyNotInBase(key) => MergeError::KeyNotInBase { input, key },
                    other => MergeError::Lora(input, other),
                })
            }
        }
    }
}

/// A scaled delta resolved against the base, ready to accumulate.
struct Contribution {
    input: usize,
    scale: f64,
    deltas: BTreeMap<TensorKey, Tensor>,
}

fn execute(base: &Checkpoint, contributions: &[Contribution]) -> Result<Checkpoint, MergeError> {
    let updated = base
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, tensor)| {
            let touching: Vec<(&Contribution, &Tensor)> = contributions
                .iter()
                .filter_map(|c| c.deltas.get(key).map(|d| (c, d)))
                .collect();
            for (c, delta) in &touching {
                if delta.shape() != tensor.shape() {
                    return Err(MergeError::Tensor {
                        input: c.input,
                        key: key.as_str().to_string(),
                        source: TensorError::ShapeMismatch {
                            expected: tensor.shape().to_vec(),
                            got: delta.shape().to_vec(),
                        },
                    });
                }
                if delta.dtype() != tensor.dtype() {
                    return Err(MergeError::Tensor {
                        input: c.input,
                        key: key.as_str().to_string(),
                        source: TensorError::DtypeMismatch {
                            expected: tensor.dtype(),
                            got: delta.dtype(),
                        },
                    });
                }
            }
            // All-zero effective scales keep the base bytes untouched,
            // matching the axpy short-circuit.
            if touching.iter().all(|(c, _)| c.scale == 0.0) {
                return Ok((key.clone(), tensor.clone()));
            }
            let mut acc = tensor.to_f32_vec();
            for (c, delta) in &touching {
                if c.scale != 0.0 {
                    accumulate_scaled(&mut acc, delta, c.scale as f32);
                }
            }
            Tensor::from_f32(tensor.dtype(), tensor.shape().to_vec(), &acc)
                .map(|t| (key.clone(), t))
                .map_err(|source| MergeError::Tensor {
                    input: 0,
                    key: key.as_str().to_string(),
                    source,
                })
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    let mut out = Checkpoint::new();
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    for (k, t) in updated {
        out.insert(k, t);
    }
    Ok(out)
}

/// Sums every input's scaled delta into the base across all layers.
pub fn merge_full(base: &Checkpoint, inputs: &[MergeInput]) -> Result<Checkpoint, MergeError> {
    let contributions = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            Ok(Contribution {
                input: i,
                scale: input.effective_scale(),
                deltas: input.deltas(base, i)?,
            })
        })
        .collect::<Result<Vec<_>, MergeError>>()?;
    let mut out = execute(base, &contributions)?;
    crate::taskvector::record_application(&mut out, &format!("merge_full inputs={}", inputs.len()));
    Ok(out)
}

/// A key an input carried that lies outside its assigned layer classes.
#[derive(Debug, Clone, Serialize)]
pub struct DroppedKey {
    pub role: Role,
    pub key: String,
    pub class: LayerClass,
}

/// What a hierarchical merge routed and what it dropped.
#[derive(Debug, Clone, Default, Serialize)]
pub struct HierarchicalReport {
    pub dropped: Vec<DroppedKey>,
    pub dialect_keys: usize,
    pub emotion_keys: usize,
}

/// Routes the dialect input to `TextEmbedding | EarlyBlock` keys and the
/// emotion input to `LateBlock` keys; everything else passes through
/// bit-identically.
pub fn merge_hierarchical(
    base: &Checkpoint,
    dialect: &MergeInput,
    emotion: &MergeInput,
    topology: &ModelTopology,
) -> Result<(Checkpoint, HierarchicalReport), MergeError> {
    let mut any_block = false;
    for key in base.keys() {
        classify_layer(key, topology)?;
        if topology.capture_block_index(key.as_str()).is_some() {
            any_block = true;
        }
    }
    if !any_block {
        return Err(MergeError::TopologyMismatch(topology.block_pattern.clone()));
    }

    let mut report = HierarchicalReport::default();
    let mut contributions = Vec::with_capacity(2);
    for (index, (role, input)) in [(Role::Dialect, dialect), (Role::Emotion, emotion)]
        .into_iter()
        .enumerate()
    {
        let mut deltas = input.deltas(base, index)?;
        let mut kept = BTreeMap::new();
        for (key, delta) in std::mem::take(&mut deltas) {
            let class = classify_layer(&key, topology)?;
            let assigned = match role {
                Role::Dialect => {
                    class == LayerClass::TextEmbedding || class == LayerClass::EarlyBlock
                }
                _ => class == LayerClass::LateBlock,
            };
            if assigned {
                kept.insert(key, delta);
            } else {
                report.dropped.push(DroppedKey {
                    role,
                    key: key.as_str().to_string(),
                    class,
                });
            }
        }
        match role {
            Role::Dialect => report.dialect_keys = kept.len(),
            _ => report.emotion_keys = kept.len(),
        }
        contributions.push(Contribution {
            input: index,
            scale: input.effective_scale(),
            deltas: kept,
        });
    }

    let mut out = execute(base, &contributions)?;
    crate::taskvector::record_application(
        &mut out,
        &format!(
            "merge_hierarchical boundary={} dialect_keys={} emotion_keys={}",
            topology.early_boundary(),
            report.dialect_keys,
            report.emotion_keys
        ),
    );
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Recipes and plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Dialect,
    Emotion,
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    TaskVector,
    Lora,
}

fn default_role() -> Role {
    Role::Generic
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeInput {
    pub path: PathBuf,
    pub kind: InputKind,
    pub coefficient: f64,
    #[serde(default = "default_role")]
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub block_pattern: String,
    pub n_blocks: usize,
    pub embedding_patterns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_index: Option<usize>,
}

impl TopologySpec {
    pub fn build(&self) -> Result<ModelTopology, MergeError> {
        ModelTopology::new(
            self.block_pattern.clone(),
            self.n_blocks,
            self.embedding_patterns.clone(),
            self.split_index,
        )
    }
}

/// Declarative merge plan, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub base: PathBuf,
    pub strategy: Strategy,
    pub inputs: Vec<RecipeInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySpec>,
    pub output: PathBuf,
}

impl MergeRecipe {
    pub fn from_json(text: &str) -> Result<MergeRecipe, MergeError> {
        serde_json::from_str(text).map_err(|e| MergeError::SchemaError(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<MergeRecipe, MergeError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(CheckpointError::Io)?;
        MergeRecipe::from_json(&text)
    }

    fn validate_roles(&self) -> Result<(), MergeError> {
        match self.strategy {
            Strategy::Full => {
                if self.inputs.is_empty() {
                    return Err(MergeError::SchemaError(
                        "full strategy requires at least one input".into(),
                    ));
                }
            }
            Strategy::Hierarchical => {
                let dialects = self
                    .inputs
                    .iter()
                    .filter(|i| i.role == Role::Dialect)
                    .count();
                let emotions = self
                    .inputs
                    .iter()
                    .filter(|i| i.role == Role::Emotion)
                    .count();
                if dialects != 1 || emotions != 1 || self.inputs.len() != 2 {
                    return Err(MergeError::RoleViolation(format!(
                        "hierarchical strategy requires exactly one dialect and one emotion input, got {dialects} dialect / {emotions} emotion of {} total",
                        self.inputs.len()
                    )));
                }
                if self.topology.is_none() {
                    return Err(MergeError::SchemaError(
                        "hierarchical strategy requires a topology".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One planned contribution to an output key.
#[derive(Debug, Clone, Serialize)]
pub struct PlanContribution {
    pub input: usize,
    pub source: PathBuf,
    pub effective_scale: f64,
}

/// A fully resolved, inspectable merge plan (dry-run output).
#[derive(Debug, Serialize)]
pub struct MergePlan {
    pub strategy: Strategy,
    pub base: PathBuf,
    pub output: PathBuf,
    pub base_keys: usize,
    /// Keys that receive at least one contribution, with their ordered
    /// contribution lists.
    pub key_plan: BTreeMap<String, Vec<PlanContribution>>,
    pub untouched_keys: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<BTreeMap<String, usize>>,
    pub dropped: Vec<DroppedKey>,
    #[serde(skip)]
    base_checkpoint: Checkpoint,
    #[serde(skip)]
    resolved: Vec<(MergeInput, Option<Role>)>,
    #[serde(skip)]
    topology: Option<ModelTopology>,
}

fn load_input(index: usize, spec: &RecipeInput) -> Result<MergeInput, MergeError> {
    if !spec.path.exists() {
        return Err(MergeError::MissingInput(index, spec.path.clone()));
    }
    let ckpt = read_checkpoint(&spec.path)?;
    match spec.kind {
        InputKind::TaskVector => {
            let vector =
                TaskVector::from_checkpoint(&ckpt).map_err(|e| MergeError::Vector(index, e))?;
            Ok(MergeInput::Vector {
                vector,
                coefficient: spec.coefficient,
            })
        }
        InputKind::Lora => {
            let adapter =
                LoraAdapter::from_checkpoint(&ckpt).map_err(|e| MergeError::Lora(index, e))?;
            Ok(MergeInput::Adapter {
                adapter,
                coefficient: spec.coefficient,
            })
        }
    }
}

/// Loads every referenced file, validates the recipe, and resolves per-key
/// contributions without writing anything.
pub fn compile_recipe(recipe: &MergeRecipe) -> Result<MergePlan, MergeError> {
    recipe.validate_roles()?;
    if !recipe.base.exists() {
        return Err(MergeError::MissingInput(usize::MAX, recipe.base.clone()));
    }
    let base = read_checkpoint(&recipe.base)?;
    let topology = match &recipe.topology {
        Some(spec) => Some(spec.build()?),
        None => None,
    };
    if recipe.strategy == Strategy::Hierarchical {
        let topology = topology.as_ref().expect("role validation requires it");
        let mut any_block = false;
        for key in base.keys() {
            if matches!(
                classify_layer(key, topology)?,
                LayerClass::EarlyBlock | LayerClass::LateBlock
            ) {
                any_block = true;
            }
        }
        if !any_block {
            return Err(MergeError::TopologyMismatch(topology.block_pattern.clone()));
        }
    }

    let mut resolved: Vec<(MergeInput, Option<Role>)> = Vec::with_capacity(recipe.inputs.len());
    for (i, spec) in recipe.inputs.iter().enumerate() {
        resolved.push((load_input(i, spec)?, Some(spec.role)));
    }

    let mut key_plan: BTreeMap<String, Vec<PlanContribution>> = BTreeMap::new();
    let mut dropped = Vec::new();
    for (i, (input, role)) in resolved.iter().enumerate() {
        let deltas = input.deltas(&base, i)?;
        for key in deltas.keys() {
            if recipe.strategy == Strategy::Hierarchical {
                let topology = topology.as_ref().expect("validated above");
                let class = classify_layer(key, topology)?;
                let assigned = match role {
                    Some(Role::Dialect) => {
                        class == LayerClass::TextEmbedding || class == LayerClass::EarlyBlock
                    }
                    Some(Role::Emotion) => class == LayerClass::LateBlock,
                    _ => true,
                };
                if !assigned {
                    dropped.push(DroppedKey {
                        role: role.unwrap_or(Role::Generic),
                        key: key.as_str().to_string(),
                        class,
                    });
                    continue;
                }
            }
            key_plan
                .entry(key.as_str().to_string())
                .or_default()
                .push(PlanContribution {
                    input: i,
                    source: recipe.inputs[i].path.clone(),
                    effective_scale: input.effective_scale(),
                });
        }
    }

    let class_counts = match &topology {
        Some(topology) => {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for key in base.keys() {
                let class = classify_layer(key, topology)?;
                *counts.entry(class.name().to_string()).or_default() += 1;
            }
            Some(counts)
        }
        None => None,
    };

    Ok(MergePlan {
        strategy: recipe.strategy,
        base: recipe.base.clone(),
        output: recipe.output.clone(),
        base_keys: base.len(),
        untouched_keys: base.len() - key_plan.len(),
        key_plan,
        class_counts,
        dropped,
        base_checkpoint: base,
        resolved,
        topology,
    })
}

/// Executes a compiled plan and returns the merged checkpoint.
pub fn execute_plan(plan: &MergePlan) -> Result<Checkpoint, MergeError> {
    match plan.strategy {
        Strategy::Full => {
            let inputs: Vec<MergeInput> = plan.resolved.iter().map(|(i, _)| i.clone()).collect();
            merge_full(&plan.base_checkpoint, &inputs)
        }
        Strategy::Hierarchical => {
            let dialect = plan
                .resolved
                .iter()
                .find(|(_, r)| *r == Some(Role::Dialect))
                .map(|(i, _)| i)
                .expect("role validation ensures a dialect input");
            let emotion = plan
                .resolved
                .iter()
                .find(|(_, r)| *r == Some(Role::Emotion))
                .map(|(i, _)| i)
                .expect("role validation ensures an emotion input");
            let topology = plan.topology.as_ref().expect("hierarchical has a topology");
            merge_hierarchical(&plan.base_checkpoint, dialect, emotion, topology)
                .map(|(ckpt, _)| ckpt)
        }
    }
}
