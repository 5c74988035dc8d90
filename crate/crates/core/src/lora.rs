//! Low-rank adapter algebra: materialization, scaled application, low-rank
//! extraction from full task vectors, and variation-based target selection.
//!
//! An adapter entry factors a weight delta as `B * A` with `A: r x k` and
//! `B: d x r`. Application realizes `W = W_pre + alpha^2 * B * A`; the
//! squared coefficient is the inference-time scaling rule, with
//! `alpha = 1.0` recovering the training-time form `W_pre + B * A`.
//!
//! Targets that are not matrices follow a fixed reshaping convention:
//! `[out, in, kernel]` weights flatten to `[out, in * kernel]` (a pure
//! relabeling of the row-major buffer); 2-D weights are used as-is. The
//! rule applied to each target is recorded in adapter metadata.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, TensorKey};
use crate::svd::{jacobi_svd, SvdError};
use crate::taskvector::TaskVector;
use crate::tensor::{axpy, cast, frobenius_norm, matmul, Dtype, Tensor, TensorError};

const KIND_KEY: &str = "stylevec.kind";
const KIND_LORA: &str = "lora_adapter";

/// Singular values below this fraction of the largest are treated as zero,
/// which keeps noise from inflating the effective rank.
pub const SINGULAR_VALUE_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("adapter key {0:?} not present in the base checkpoint")]
    KeyNotInBase(String),
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("rank {rank} exceeds min(d, k) = {max} for key {key:?}")]
    RankTooLarge {
        key: String,
        rank: usize,
        max: usize,
    },
    #[error("SVD failed for key {key:?}: {source}")]
    SvdNonConvergence { key: String, source: SvdError },
    #[error("key {key:?} has shape {shape:?}, which does not reshape to a matrix")]
    NotAMatrix { key: String, shape: Vec<usize> },
    #[error("scale must be finite, got {0}")]
    NonFiniteScale(f64),
    #[error("key {key:?}: {source}")]
    Tensor { key: String, source: TensorError },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("file is not a LoRA adapter (stylevec.kind = {0:?})")]
    WrongKind(String),
    #[error("adapter entry {key:?} is inconsistent: {reason}")]
    MalformedEntry { key: String, reason: String },
}

/// How a target tensor's shape maps onto the `d x k` matrix the factors
/// address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReshapeRule {
    AsIs,
    Flatten3d,
}

/// Resolves a target shape to `(d, k, rule)` under the fixed convention.
pub fn matrix_view(
    key: &TensorKey,
    shape: &[usize],
) -> Result<(usize, usize, ReshapeRule), LoraError> {
    match shape {
        [d, k] => Ok((*d, *k, ReshapeRule::AsIs)),
        [d, a, b] => Ok((*d, a * b, ReshapeRule::Flatten3d)),
        _ => Err(LoraError::NotAMatrix {
            key: key.as_str().to_string(),
            shape: shape.to_vec(),
        }),
    }
}

fn reshape_note(rule: ReshapeRule, shape: &[usize], d: usize, k: usize) -> String {
    match rule {
        ReshapeRule::AsIs => "as_is".to_string(),
        ReshapeRule::Flatten3d => {
            let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
            format!("flatten:{}->{d}x{k}", dims.join("x"))
        }
    }
}

/// One low-rank factor pair. `a_factor: r x k`, `b_factor: d x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub a_factor: Tensor,
    pub b_factor: Tensor,
}

impl LoraEntry {
    pub fn new(a_factor: Tensor, b_factor: Tensor) -> Result<LoraEntry, TensorError> {
        if a_factor.shape().len() != 2
            || b_factor.shape().len() != 2
            || a_factor.shape()[0] != b_factor.shape()[1]
        {
            return Err(TensorError::ShapeMismatch {
                expected: b_factor.shape().to_vec(),
                got: a_factor.shape().to_vec(),
            });
        }
        Ok(LoraEntry { a_factor, b_factor })
    }

    pub fn rank(&self) -> usize {
        self.a_factor.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.b_factor.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.a_factor.shape()[1]
    }
}

/// A set of per-target low-rank factor pairs plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoraAdapter {
    entries: BTreeMap<TensorKey, LoraEntry>,
    metadata: BTreeMap<String, String>,
}

impl LoraAdapter {
    pub fn new() -> LoraAdapter {
        LoraAdapter::default()
    }

    pub fn insert(&mut self, key: TensorKey, entry: LoraEntry) {
        self.entries.insert(key, entry);
    }

    pub fn get(&self, key: &TensorKey) -> Option<&LoraEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> &BTreeMap<TensorKey, LoraEntry> {
        &self.entries
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

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Serializes as a checkpoint with `<target>.lora_A` / `<target>.lora_B`
    /// tensor keys.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (k, v) in &self.metadata {
            ckpt.set_metadata(k.clone(), v.clone());
        }
        ckpt.set_metadata(KIND_KEY, KIND_LORA);
        let mut max_rank = 0usize;
        for (key, entry) in &self.entries {
            max_rank = max_rank.max(entry.rank());
            let a_key = TensorKey::new(format!("{}.lora_A", key.as_str()))
                .expect("valid key stays valid with a suffix");
            let b_key = TensorKey::new(format!("{}.lora_B", key.as_str()))
                .expect("valid key stays valid with a suffix");
            ckpt.insert(a_key, entry.a_factor.clone());
            ckpt.insert(b_key, entry.b_factor.clone());
        }
        ckpt.set_metadata("stylevec.rank", max_rank.to_string());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LoraAdapter, LoraError> {
        match ckpt.metadata().get(KIND_KEY) {
            Some(kind) if kind == KIND_LORA => {}
            Some(kind) => return Err(LoraError::WrongKind(kind.clone())),
            None => {}
        }
        let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (key, tensor) in ckpt.iter() {
            let name = key.as_str();
            if let Some(target) = name.strip_suffix(".lora_A") {
                halves.entry(target.to_string()).or_default().0 = Some(tensor.clone());
            } else if let Some(target) = name.strip_suffix(".lora_B") {
                halves.entry(target.to_string()).or_default().1 = Some(tensor.clone());
            } else {
                return Err(LoraError::MalformedEntry {
                    key: name.to_string(),
                    reason: "tensor name lacks a .lora_A/.lora_B suffix".into(),
                });
            }
        }
        let mut adapter = LoraAdapter::new();
        for (target, pair) in halves {
            let (a, b) = match pair {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(LoraError::MalformedEntry {
                        key: target,
                        reason: "missing one of the lora_A / lora_B factors".into(),
                    })
                }
            };
            let entry = LoraEntry::new(a, b).map_err(|e| LoraError::MalformedEntry {
                key: target.clone(),
                reason: e.to_string(),
            })?;
            let key = TensorKey::new(target)?;
            adapter.insert(key, entry);
        }
        for (k, v) in ckpt.metadata() {
            if k != KIND_KEY {
                adapter.metadata.insert(k.clone(), v.clone());
            }
        }
        Ok(adapter)
    }
}

/// Computes the dense delta `B * A` for one entry. Always F32.
pub fn materialize_delta(entry: &LoraEntry) -> Result<Tensor, LoraError> {
    matmul(&entry.b_factor, &entry.a_factor).map_err(|source| LoraError::Tensor {
        key: String::new(),
        source,
    })
}

/// Materializes an adapter against a base checkpoint: per target, the dense
/// delta in the base's dtype and original shape. Shared by direct
/// application and the merge planner so both scale the same bytes.
pub fn materialize_against(
    base: &Checkpoint,
    adapter: &LoraAdapter,
) -> Result<BTreeMap<TensorKey, Tensor>, LoraError> {
    adapter
        .entries()
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, entry)| {
            let weight = base
                .get(key)
                .ok_or_else(|| LoraError::KeyNotInBase(key.as_str().to_string()))?;
            let (d, k, _) = matrix_view(key, weight.shape())?;
            if entry.out_dim() != d || entry.in_dim() != k {
                return Err(LoraError::Tensor {
                    key: key.as_str().to_string(),
                    source: TensorError::ShapeMismatch {
                        expected: vec![d, k],
                        got: vec![entry.out_dim(), entry.in_dim()],
                    },
                });
            }
            let delta = materialize_delta(entry).map_err(|e| match e {
                LoraError::Tensor { source, .. } => LoraError::Tensor {
                    key: key.as_str().to_string(),
                    source,
                },
                other => other,
            })?;
            let delta = cast(&delta, weight.dtype())
                .with_shape(weight.shape().to_vec())
                .map_err(|source| LoraError::Tensor {
                    key: key.as_str().to_string(),
                    source,
                })?;
            Ok((key.clone(), delta))
        })
        .collect()
}

/// Applies `W = W_pre + alpha^2 * B * A` per target key. Untouched keys
/// pass through bit-identically; `alpha = 0` short-circuits to the base.
pub fn apply_lora(
    base: &Checkpoint,
    adapter: &LoraAdapter,
    alpha: f64,
) -> Result<Checkpoint, LoraError> {
    if !alpha.is_finite() {
        return Err(LoraError::NonFiniteScale(alpha));
    }
    let scale = alpha * alpha;
    let deltas = materialize_against(base, adapter)?;
    let mut out = base.clone();
    for (key, delta) in &deltas {
        let weight = out.get(key).expect("materialize_against checked the key");
        let updated = axpy(weight, delta, scale).map_err(|source| LoraError::Tensor {
            key: key.as_str().to_string(),
            source,
        })?;
        out.insert(key.clone(), updated);
    }
    crate::taskvector::record_application(&mut out, &format!("lora alpha={alpha}"));
    Ok(out)
}

/// Extracts a rank-`rank` adapter from a full task vector by truncated SVD
/// of each target delta. The singular values split evenly across the two
/// factors: `A = S^{1/2} V_r^T`, `B = U_r S^{1/2}`.
pub fn extract_lora(
    tau: &TaskVector,
    rank: NonZeroUsize,
    targets: &[TensorKey],
) -> Result<LoraAdapter, LoraError> {
    let rank = rank.get();
    let extracted: Vec<(TensorKey, LoraEntry, String)> = targets
        .par_iter()
        .map(|key| {
            let tensor = tau
                .get(key)
                .ok_or_else(|| LoraError::KeyNotFound(key.as_str().to_string()))?;
            let (d, k, rule) = matrix_view(key, tensor.shape())?;
            if rank > d.min(k) {
                return Err(LoraError::RankTooLarge {
                    key: key.as_str().to_string(),
                    rank,
                    max: d.min(k),
                });
            }
            let matrix: Vec<f64> = tensor.to_f32_vec().iter().map(|&v| v as f64).collect();
            let svd = jacobi_svd(&matrix, d, k).map_err(|source| LoraError::SvdNonConvergence {
                key: key.as_str().to_string(),
                source,
            })?;

            let cutoff = SINGULAR_VALUE_TOL * svd.s.first().copied().unwrap_or(0.0);
            let p = svd.s.len();
            let mut a = vec![0.0f32; rank * k];
            let mut b = vec![0.0f32; d * rank];
            for l in 0..rank {
                let sigma = svd.s[l];
                if sigma <= cutoff {
                    continue;
                }
                let root = sigma.sqrt();
                for j in 0..k {
                    a[l * k + j] = (root * svd.vt[l * k + j]) as f32;
                }
                for i in 0..d {
                    b[i * rank + l] = (root * svd.u[i * p + l]) as f32;
                }
            }
            let entry = LoraEntry::new(
                Tensor::from_f32(Dtype::F32, vec![rank, k], &a).expect("sized above"),
                Tensor::from_f32(Dtype::F32, vec![d, rank], &b).expect("sized above"),
            )
            .expect("factor shapes agree by construction");
            let note = reshape_note(rule, tensor.shape(), d, k);
            Ok((key.clone(), entry, note))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut adapter = LoraAdapter::new();
    adapter.set_metadata("stylevec.rank", rank.to_string());
    for (key, entry, note) in extracted {
        adapter.set_metadata(format!("stylevec.reshape.{}", key.as_str()), note);
        adapter.insert(key, entry);
    }
    Ok(adapter)
}

/// Orders the keys of a task vector by relative parameter variation:
/// `||tau[k]|| / max(||base[k]||, tiny)`, descending, ties broken
/// lexicographically.
pub fn rank_targets_by_variation(
    tau: &TaskVector,
    base: &Checkpoint,
) -> Result<Vec<(TensorKey, f64)>, LoraError> {
    let mut ranked: Vec<(TensorKey, f64)> = tau
        .entries()
        .iter()
        .map(|(key, delta)| {
            let weight = base
                .get(key)
                .ok_or_else(|| LoraError::KeyNotInBase(key.as_str().to_string()))?;
            let rel = frobenius_norm(delta) / frobenius_norm(weight).max(f64::MIN_POSITIVE);
            Ok((key.clone(), rel))
        })
        .collect::<Result<Vec<_>, LoraError>>()?;
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}
