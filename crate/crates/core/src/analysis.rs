//! Parameter-space probes: directional consistency between task vectors,
//! seeded Gaussian perturbation, per-layer variation statistics, and a
//! fine-tuning linearity measurement.
//!
//! All reductions run in f64 over a fixed order (lexicographic by key, then
//! element index), so reports are deterministic. Cosines are computed in
//! f64 because task-vector norms span many orders of magnitude across
//! layers and f32 dot products lose the signal.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, TensorKey};
use crate::merge::{classify_layer, LayerClass, MergeError, ModelTopology};
use crate::rng::CounterRng;
use crate::taskvector::TaskVector;
use crate::tensor::{frobenius_norm, Tensor};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("vectors share no comparable keys")]
    EmptyIntersection,
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("key {0:?} not present in the base checkpoint")]
    KeyNotInBase(String),
    #[error("checkpoint {index} is not key-aligned with the base: {reason}")]
    KeySetMismatch { index: usize, reason: String },
    #[error("trajectory has {0} checkpoints, need at least 3")]
    TrajectoryTooShort(usize),
    #[error("degenerate trajectory: the final task vector has zero norm")]
    DegenerateTrajectory,
    #[error("sigma must be a finite non-negative real, got {0}")]
    InvalidSigma(f64),
    #[error("at least {needed} vectors required, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error(transparent)]
    Topology(#[from] MergeError),
}

// ---------------------------------------------------------------------------
// Directional consistency
// ---------------------------------------------------------------------------

/// Pairwise cosine matrix between task vectors. `None` entries mark
/// undefined cosines (a zero-norm vector), never NaN.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub labels: Vec<String>,
    pub keys_compared: usize,
    pub cosine: Vec<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer_cosine: Option<BTreeMap<String, Vec<Vec<Option<f64>>>>>,
}

fn dot_and_norms(keys: &[&TensorKey], u: &TaskVector, v: &TaskVector) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for key in keys {
        let a = u.get(key).expect("intersection key").to_f32_vec();
        let b = v.get(key).expect("intersection key").to_f32_vec();
        for (x, y) in a.iter().zip(b.iter()) {
            let (x, y) = (*x as f64, *y as f64);
            dot += x * y;
            nu += x * x;
            nv += y * y;
        }
    }
    (dot, nu.sqrt(), nv.sqrt())
}

fn cosine_matrix(keys: &[&TensorKey], vectors: &[TaskVector]) -> Vec<Vec<Option<f64>>> {
    let n = vectors.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let (dot, nu, nv) = dot_and_norms(keys, &vectors[i], &vectors[j]);
            let entry = if nu == 0.0 || nv == 0.0 {
                None
            } else {
                Some((dot / (nu * nv)).clamp(-1.0, 1.0))
            };
            m[i][j] = entry;
            m[j][i] = entry;
        }
    }
    m
}

/// Computes the pairwise cosine matrix over the flattened intersection of
/// keys. Common keys whose shapes or dtypes disagree are excluded from the
/// comparison.
pub fn direction_consistency(
    vectors: &[TaskVector],
    per_layer: bool,
) -> Result<ConsistencyReport, AnalysisError> {
    if vectors.len() < 2 {
        return Err(AnalysisError::TooFewVectors {
            needed: 2,
            got: vectors.len(),
        });
    }
    let first = &vectors[0];
    let keys: Vec<&TensorKey> = first
        .keys()
        .filter(|key| {
            let proto = first.get(key).expect("own key");
            vectors[1..].iter().all(|v| {
                v.get(key)
                    .map(|t| t.shape() == proto.shape() && t.dtype() == proto.dtype())
                    .unwrap_or(false)
            })
        })
        .collect();
    if keys.is_empty() {
        return Err(AnalysisError::EmptyIntersection);
    }

    let labels = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let id = &v.provenance().finetuned_id;
            if id.is_empty() {
                format!("vector_{i}")
            } else {
                id.clone()
            }
        })
        .collect();

    let per_layer_cosine = per_layer.then(|| {
        keys.iter()
            .map(|key| {
                (
                    key.as_str().to_string(),
                    cosine_matrix(std::slice::from_ref(key), vectors),
                )
            })
            .collect()
    });

    Ok(ConsistencyReport {
        labels,
        keys_compared: keys.len(),
        cosine: cosine_matrix(&keys, vectors),
        per_layer_cosine,
    })
}

// ---------------------------------------------------------------------------
// Perturbation
// ---------------------------------------------------------------------------

/// Which tensors a perturbation touches.
#[derive(Debug, Clone)]
pub enum TargetSelector {
    Keys(Vec<TensorKey>),
    Class {
        class: LayerClass,
        topology: ModelTopology,
    },
}

/// Seeded Gaussian perturbation of selected tensors.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    pub targets: TargetSelector,
    pub sigma: f64,
    pub seed: u64,
}

/// Adds i.i.d. `N(0, sigma^2)` noise to the targeted tensors. Noise comes
/// from the counter-based generator keyed by `(seed, tensor key)`, so the
/// output is bit-reproducible and non-target keys are untouched bytes.
pub fn perturb(ckpt: &Checkpoint, spec: &PerturbationSpec) -> Result<Checkpoint, AnalysisError> {
    if !spec.sigma.is_finite() || spec.sigma < 0.0 {
        return Err(AnalysisError::InvalidSigma(spec.sigma));
    }
    let targets: Vec<TensorKey> = match &spec.targets {
        TargetSelector::Keys(keys) => {
            for key in keys {
                if !ckpt.contains(key) {
                    return Err(AnalysisError::KeyNotFound(key.as_str().to_string()));
                }
            }
            keys.clone()
        }
        TargetSelector::Class { class, topology } => {
            let mut keys = Vec::new();
            for key in ckpt.keys() {
                if classify_layer(key, topology)? == *class {
                    keys.push(key.clone());
                }
            }
            keys
        }
    };

    let mut out = ckpt.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    for key in &targets {
        let tensor = ckpt.get(key).expect("targets validated above");
        let stream = CounterRng::substream(spec.seed, key.as_str());
        let values: Vec<f32> = tensor
            .to_f32_vec()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + (stream.gaussian(i as u64) * spec.sigma) as f32)
            .collect();
        let perturbed = Tensor::from_f32(tensor.dtype(), tensor.shape().to_vec(), &values)
            .expect("same element count");
        out.insert(key.clone(), perturbed);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-layer statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct KeyStats {
    pub key: String,
    pub elements: u64,
    pub absolute_norm: f64,
    pub base_norm: f64,
    pub relative_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub class: String,
    pub keys: usize,
    pub elements: u64,
    pub absolute_norm: f64,
    pub relative_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub per_key: Vec<KeyStats>,
    pub total_elements: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<GroupStats>>,
}

/// Per-key absolute and relative variation of a task vector against its
/// base, with optional aggregation by layer class. Group norms compose in
/// quadrature (the Frobenius norm of the concatenated deltas).
pub fn per_layer_stats(
    tau: &TaskVector,
    base: &Checkpoint,
    topology: Option<&ModelTopology>,
) -> Result<StatsReport, AnalysisError> {
    let mut per_key = Vec::with_capacity(tau.len());
    let mut total_elements = 0u64;
    for (key, delta) in tau.entries() {
        let weight = base
            .get(key)
            .ok_or_else(|| AnalysisError::KeyNotInBase(key.as_str().to_string()))?;
        let absolute = frobenius_norm(delta);
        let base_norm = frobenius_norm(weight);
        total_elements += delta.numel() as u64;
        per_key.push(KeyStats {
            key: key.as_str().to_string(),
            elements: delta.numel() as u64,
            absolute_norm: absolute,
            base_norm,
            relative_norm: absolute / base_norm.max(f64::MIN_POSITIVE),
        });
    }

    let groups = match topology {
        Some(topology) => {
            let mut acc: BTreeMap<LayerClass, (usize, u64, f64, f64)> = BTreeMap::new();
            for (key, delta) in tau.entries() {
                let class = classify_layer(key, topology)?;
                let weight = base.get(key).expect("checked above");
                let g = acc.entry(class).or_insert((0, 0, 0.0, 0.0));
                g.0 += 1;
                g.1 += delta.numel() as u64;
                g.2 += frobenius_norm(delta).powi(2);
                g.3 += frobenius_norm(weight).powi(2);
            }
            Some(
                acc.into_iter()
                    .map(|(class, (keys, elements, d2, b2))| GroupStats {
                        class: class.name().to_string(),
                        keys,
                        elements,
                        absolute_norm: d2.sqrt(),
                        relative_norm: d2.sqrt() / b2.sqrt().max(f64::MIN_POSITIVE),
                    })
                    .collect(),
            )
        }
        None => None,
    };

    Ok(StatsReport {
        per_key,
        total_elements,
        groups,
    })
}

// ---------------------------------------------------------------------------
// Linearity probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct StepDeviation {
    pub step: usize,
    /// Cosine between this step's task vector and the final one; `None`
    /// when the step vector has zero norm.
    pub cosine: Option<f64>,
    /// `||tau_t - proj(tau_t)|| / ||tau_t||`: 0 on a perfectly linear
    /// trajectory, up to 1 for an orthogonal excursion.
    pub relative_residual: Option<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearityReport {
    pub steps: Vec<StepDeviation>,
    pub final_norm: f64,
}

fn check_aligned(base: &Checkpoint, other: &Checkpoint, index: usize) -> Result<(), AnalysisError> {
    for (key, tensor) in base.iter() {
        match other.get(key) {
            None => {
                return Err(AnalysisError::KeySetMismatch {
                    index,
                    reason: format!("missing key {:?}", key.as_str()),
                })
            }
            Some(t) if t.shape() != tensor.shape() || t.dtype() != tensor.dtype() => {
                return Err(AnalysisError::KeySetMismatch {
                    index,
                    reason: format!("layout differs for key {:?}", key.as_str()),
                })
            }
            _ => {}
        }
    }
    for key in other.keys() {
        if !base.contains(key) {
            return Err(AnalysisError::KeySetMismatch {
                index,
                reason: format!("extra key {:?}", key.as_str()),
            });
        }
    }
    Ok(())
}

/// Measures how linearly a fine-tuning trajectory moves toward its final
/// point: per step, the cosine against the final task vector and the
/// relative residual after projecting onto it.
pub fn linearity_probe(
    base: &Checkpoint,
    trajectory: &[Checkpoint],
) -> Result<LinearityReport, AnalysisError> {
    if trajectory.len() < 3 {
        return Err(AnalysisError::TrajectoryTooShort(trajectory.len()));
    }
    for (i, ckpt) in trajectory.iter().enumerate() {
        check_aligned(base, ckpt, i)?;
    }

    // tau_t[k] = theta_t[k] - base[k], accumulated pairwise in f64.
    let keys: Vec<&TensorKey> = base.keys().collect();
    let tau_of = |ckpt: &Checkpoint| -> Vec<Vec<f64>> {
        keys.iter()
            .map(|key| {
                let b = base.get(key).expect("own key").to_f32_vec();
                let t = ckpt.get(key).expect("aligned").to_f32_vec();
                t.iter()
                    .zip(b.iter())
                    .map(|(x, y)| *x as f64 - *y as f64)
                    .collect()
            })
            .collect()
    };

    let tau_final = tau_of(trajectory.last().expect("len >= 3"));
    let norm_of = |tau: &[Vec<f64>]| -> f64 {
        tau.iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    };
    let final_norm = norm_of(&tau_final);
    if final_norm == 0.0 {
        return Err(AnalysisError::DegenerateTrajectory);
    }

    let steps = trajectory
        .iter()
        .enumerate()
        .map(|(step, ckpt)| {
            let tau = tau_of(ckpt);
            let norm = norm_of(&tau);
            if norm == 0.0 {
                return StepDeviation {
                    step,
                    cosine: None,
                    relative_residual: None,
                    norm,
                };
            }
            let dot: f64 = tau
                .iter()
                .zip(tau_final.iter())
                .flat_map(|(a, b)| a.iter().zip(b.iter()))
                .map(|(x, y)| x * y)
                .sum();
            let cosine = (dot / (norm * final_norm)).clamp(-1.0, 1.0);
            // ||tau - proj||^2 = ||tau||^2 (1 - cos^2), so the relative
            // residual is sqrt(1 - cos^2).
            let residual = (1.0 - cosine * cosine).max(0.0).sqrt();
            StepDeviation {
                step,
                cosine: Some(cosine),
                relative_residual: Some(residual),
                norm,
            }
        })
        .collect();

    Ok(LinearityReport { steps, final_norm })
}
