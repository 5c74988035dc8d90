//! Task-vector construction, coefficient scaling, and application.
//!
//! A task vector is the per-key elementwise difference between a fine-tuned
//! checkpoint and its base. Scaling is lazy: an `EVector` pairs a vector
//! with a coefficient, and the multiplication happens once at application
//! time so a single vector can serve many coefficients without accumulating
//! rounding steps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, TensorKey};
use crate::tensor::{axpy, elementwise_sub, Tensor, TensorError};

/// Default ceiling for the emotion strength coefficient. Configurable by
/// callers; this mirrors the validated dialect enhancement coefficient.
pub const DEFAULT_BETA_MAX: f64 = 3.0;

const KIND_KEY: &str = "stylevec.kind";
const KIND_TASK_VECTOR: &str = "task_vector";

#[derive(Debug, Error)]
pub enum TaskVectorError {
    #[error("key sets differ under strict alignment: {only_in_finetuned} key(s) only in the fine-tuned checkpoint, {only_in_base} only in the base (first: {first:?})")]
    KeySetMismatch {
        only_in_finetuned: usize,
        only_in_base: usize,
        first: String,
    },
    #[error("no common keys with matching shape and dtype")]
    EmptyIntersection,
    #[error("coefficient must be finite, got {0}")]
    NonFiniteCoefficient(f64),
    #[error("coefficient {coefficient} outside [0, {beta_max}]")]
    CoefficientOutOfRange { coefficient: f64, beta_max: f64 },
    #[error("vector key {0:?} not present in the base checkpoint")]
    KeyNotInBase(String),
    #[error("key {key:?}: {source}")]
    Tensor { key: String, source: TensorError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("file is not a task vector (stylevec.kind = {0:?})")]
    WrongKind(String),
}

fn tensor_err(key: &TensorKey) -> impl FnOnce(TensorError) -> TaskVectorError + '_ {
    move |source| TaskVectorError::Tensor {
        key: key.as_str().to_string(),
        source,
    }
}

/// How two key sets are lined up when building a task vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyAlignmentPolicy {
    /// Both checkpoints must have identical key sets.
    Strict,
    /// Only common keys with matching shape/dtype participate; the rest are
    /// reported, never silently dropped.
    Intersect,
}

impl KeyAlignmentPolicy {
    pub fn name(self) -> &'static str {
        match self {
            KeyAlignmentPolicy::Strict => "strict",
            KeyAlignmentPolicy::Intersect => "intersect",
        }
    }

    pub fn parse(s: &str) -> Option<KeyAlignmentPolicy> {
        match s {
            "strict" => Some(KeyAlignmentPolicy::Strict),
            "intersect" => Some(KeyAlignmentPolicy::Intersect),
            _ => None,
        }
    }
}

/// Where a task vector came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub base_id: String,
    pub finetuned_id: String,
    pub alignment: KeyAlignmentPolicy,
}

/// Why a key was left out of an intersect-mode build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    OnlyInFinetuned,
    OnlyInBase,
    ShapeMismatch {
        finetuned: Vec<usize>,
        base: Vec<usize>,
    },
    DtypeMismatch {
        finetuned: String,
        base: String,
    },
}

/// Machine-checkable record of keys excluded during alignment.
#[derive(Debug, Clone, Default, Serialize)]
pub struct AlignmentReport {
    pub skipped: Vec<(String, SkipReason)>,
}

/// A checkpoint-shaped delta: per-key difference of two checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    entries: BTreeMap<TensorKey, Tensor>,
    provenance: Provenance,
}

impl TaskVector {
    pub fn from_entries(entries: BTreeMap<TensorKey, Tensor>, provenance: Provenance) -> Self {
        TaskVector {
            entries,
            provenance,
        }
    }

    pub fn entries(&self) -> &BTreeMap<TensorKey, Tensor> {
        &self.entries
    }

    pub fn get(&self, key: &TensorKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &TensorKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn set_ids(&mut self, base_id: impl Into<String>, finetuned_id: impl Into<String>) {
        self.provenance.base_id = base_id.into();
        self.provenance.finetuned_id = finetuned_id.into();
    }

    /// Serializes as an ordinary checkpoint with provenance metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt: Checkpoint = self
            .entries
            .iter()
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        ckpt.set_metadata(KIND_KEY, KIND_TASK_VECTOR);
        ckpt.set_metadata("stylevec.base_id", &self.provenance.base_id);
        ckpt.set_metadata("stylevec.finetuned_id", &self.provenance.finetuned_id);
        ckpt.set_metadata("stylevec.alignment", self.provenance.alignment.name());
        ckpt
    }

    /// Reads a task vector back from checkpoint form. Files without a
    /// `stylevec.kind` are accepted (any checkpoint-shaped delta works);
    /// files claiming a different kind are refused.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TaskVector, TaskVectorError> {
        if let Some(kind) = ckpt.metadata().get(KIND_KEY) {
            if kind != KIND_TASK_VECTOR {
                return Err(TaskVectorError::WrongKind(kind.clone()));
            }
        }
        let get = |k: &str| ckpt.metadata().get(k).cloned().unwrap_or_default();
        let alignment = ckpt
            .metadata()
            .get("stylevec.alignment")
            .and_then(|s| KeyAlignmentPolicy::parse(s))
            .unwrap_or(KeyAlignmentPolicy::Strict);
        Ok(TaskVector {
            entries: ckpt.iter().map(|(k, t)| (k.clone(), t.clone())).collect(),
            provenance: Provenance {
                base_id: get("stylevec.base_id"),
                finetuned_id: get("stylevec.finetuned_id"),
                alignment,
            },
        })
    }
}

/// A task vector paired with its scaling coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct EVector {
    vector: TaskVector,
    coefficient: f64,
}

impl EVector {
    pub fn vector(&self) -> &TaskVector {
        &self.vector
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn into_vector(self) -> TaskVector {
        self.vector
    }
}

fn id_of(ckpt: &Checkpoint) -> String {
    ckpt.metadata()
        .get("stylevec.id")
        .cloned()
        .unwrap_or_default()
}

/// Builds the per-key difference `finetuned - base`.
pub fn build_task_vector(
    finetuned: &Checkpoint,
    base: &Checkpoint,
    policy: KeyAlignmentPolicy,
) -> Result<(TaskVector, AlignmentReport), TaskVectorError> {
    let mut report = AlignmentReport::default();
    let mut pairs: Vec<(&TensorKey, &Tensor, &Tensor)> = Vec::new();

    match policy {
        KeyAlignmentPolicy::Strict => {
            let only_ft: Vec<&TensorKey> = finetuned.keys().filter(|k| !base.contains(k)).collect();
            let only_base: Vec<&TensorKey> =
                base.keys().filter(|k| !finetuned.contains(k)).collect();
            if !only_ft.is_empty() || !only_base.is_empty() {
                let first = only_ft
                    .first()
                    .or(only_base.first())
                    .map(|k| k.as_str().to_string())
                    .unwrap_or_default();
                return Err(TaskVectorError::KeySetMismatch {
                    only_in_finetuned: only_ft.len(),
                    only_in_base: only_base.len(),
                    first,
                });
            }
            for (key, ft) in finetuned.iter() {
                pairs.push((key, ft, base.get(key).expect("key sets are equal")));
            }
        }
        KeyAlignmentPolicy::Intersect => {
            for (key, ft) in finetuned.iter() {
                match base.get(key) {
                    None => report
                        .skipped
                        .push((key.as_str().to_string(), SkipReason::OnlyInFinetuned)),
                    Some(b) if b.shape() != ft.shape() => report.skipped.push((
                        key.as_str().to_string(),
                        SkipReason::ShapeMismatch {
                            finetuned: ft.shape().to_vec(),
                            base: b.shape().to_vec(),
                        },
                    )),
                    Some(b) if b.dtype() != ft.dtype() => report.skipped.push((
                        key.as_str().to_string(),
                        SkipReason::DtypeMismatch {
                            finetuned: ft.dtype().name().into(),
                            base: b.dtype().name().into(),
                        },
                    )),
                    Some(b) => pairs.push((key, ft, b)),
                }
            }
            for (key, _) in base.iter() {
                if !finetuned.contains(key) {
                    report
                        .skipped
                        .push((key.as_str().to_string(), SkipReason::OnlyInBase));
                }
            }
            if pairs.is_empty() {
                return Err(TaskVectorError::EmptyIntersection);
            }
        }
    }

    let entries = pairs
        .into_par_iter()
        .map(|(key, ft, b)| {
            elementwise_sub(ft, b)
                .map(|d| (key.clone(), d))
                .map_err(tensor_err(key))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    Ok((
        TaskVector {
            entries,
            provenance: Provenance {
                base_id: id_of(base),
                finetuned_id: id_of(finetuned),
                alignment: policy,
            },
        },
        report,
    ))
}

/// Pairs a vector with a coefficient (lazy scaling).
pub fn scale_task_vector(vector: TaskVector, coefficient: f64) -> Result<EVector, TaskVectorError> {
    if !coefficient.is_finite() {
        return Err(TaskVectorError::NonFiniteCoefficient(coefficient));
    }
    Ok(EVector {
        vector,
        coefficient,
    })
}

/// Emotion-strength scaling: the coefficient must lie in `[0, beta_max]`.
pub fn scale_emotion_vector(
    vector: TaskVector,
    coefficient: f64,
    beta_max: f64,
) -> Result<EVector, TaskVectorError> {
    if !coefficient.is_finite() {
        return Err(TaskVectorError::NonFiniteCoefficient(coefficient));
    }
    if !(0.0..=beta_max).contains(&coefficient) {
        return Err(TaskVectorError::CoefficientOutOfRange {
            coefficient,
            beta_max,
        });
    }
    Ok(EVector {
        vector,
        coefficient,
    })
}

/// Applies `base + coefficient * vector` per key. Keys the vector does not
/// cover pass through bit-identically; metadata records what was applied.
pub fn apply_evector(base: &Checkpoint, eps: &EVector) -> Result<Checkpoint, TaskVectorError> {
    for key in eps.vector.keys() {
        if !base.contains(key) {
            return Err(TaskVectorError::KeyNotInBase(key.as_str().to_string()));
        }
    }
    let updated = base
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, tensor)| match eps.vector.get(key) {
            Some(delta) => axpy(tensor, delta, eps.coefficient)
                .map(|t| (key.clone(), t))
                .map_err(tensor_err(key)),
            None => Ok((key.clone(), tensor.clone())),
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    let mut out = Checkpoint::new();
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    for (k, t) in updated {
        out.insert(k, t);
    }
    record_application(
        &mut out,
        &format!(
            "vector={} coefficient={}",
            display_id(&eps.vector.provenance.finetuned_id),
            eps.coefficient
        ),
    );
    Ok(out)
}

fn display_id(id: &str) -> &str {
    if id.is_empty() {
        "(unnamed)"
    } else {
        id
    }
}

/// Appends an `stylevec.applied.N` metadata record.
pub(crate) fn record_application(ckpt: &mut Checkpoint, note: &str) {
    let n = ckpt
        .metadata()
        .keys()
        .filter(|k| k.starts_with("stylevec.applied."))
        .count();
    ckpt.set_metadata(format!("stylevec.applied.{n}"), note);
}

/// Coefficient-weighted sum of several vectors, accumulated per element in
/// f32 in list order. Keys missing from a term contribute zero.
pub fn combine_linear(terms: &[EVector]) -> Result<TaskVector, TaskVectorError> {
    let mut layout: BTreeMap<&TensorKey, &Tensor> = BTreeMap::new();
    for term in terms {
        for (key, tensor) in term.vector.entries() {
            match layout.get(key) {
                None => {
                    layout.insert(key, tensor);
                }
                Some(seen) => {
                    if seen.shape() != tensor.shape() {
                        return Err(TaskVectorError::Tensor {
                            key: key.as_str().to_string(),
                            source: TensorError::ShapeMismatch {
                                expected: seen.shape().to_vec(),
                                got: tensor.shape().to_vec(),
                            },
                        });
                    }
                    if seen.dtype() != tensor.dtype() {
                        return Err(TaskVectorError::Tensor {
                            key: key.as_str().to_string(),
                            source: TensorError::DtypeMismatch {
                                expected: seen.dtype(),
                                got: tensor.dtype(),
                            },
                        });
                    }
                }
            }
        }
    }

    let entries = layout
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, proto)| {
            let mut acc = vec![0.0f32; proto.numel()];
            for term in terms {
                if let Some(tensor) = term.vector.get(key) {
                    crate::tensor::accumulate_scaled(&mut acc, tensor, term.coefficient() as f32);
                }
            }
            Tensor::from_f32(proto.dtype(), proto.shape().to_vec(), &acc)
                .map(|t| (key.clone(), t))
                .map_err(tensor_err(key))
        })
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    let provenance = Provenance {
        base_id: terms
            .first()
            .map(|t| t.vector.provenance.base_id.clone())
            .unwrap_or_default(),
        finetuned_id: "linear_combination".to_string(),
        alignment: KeyAlignmentPolicy::Strict,
    };
    Ok(TaskVector {
        entries,
        provenance,
    })
}
