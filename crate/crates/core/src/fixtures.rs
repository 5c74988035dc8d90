//! Deterministic toy checkpoints shaped like a small diffusion-transformer
//! stack, plus "fine-tuned" variants with planted, ledgered deltas. Every
//! other module's tests lean on the ledger as ground truth.
//!
//! Key grammar (matches the default topology patterns):
//!   text_embed.weight
//!   transformer_blocks.{i}.attn.{to_q,to_k,to_v,to_out}.weight
//!   transformer_blocks.{i}.ff.{w1,w2}.weight
//!   transformer_blocks.{i}.norm.weight

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, TensorKey};
use crate::merge::{classify_layer, LayerClass, ModelTopology};
use crate::rng::CounterRng;
use crate::tensor::{axpy, Dtype, Tensor};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("key {0:?} not found in the base checkpoint")]
    KeyNotFound(String),
    #[error(transparent)]
    Topology(#[from] crate::merge::MergeError),
}

/// Tensor dimensions of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureDims {
    pub embed: usize,
    pub hidden: usize,
    pub heads: usize,
}

/// Everything needed to generate a base checkpoint deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub n_blocks: usize,
    pub dims: FixtureDims,
    pub dtype: Dtype,
    pub seed: u64,
}

impl FixtureSpec {
    fn validate(&self) -> Result<(), FixtureError> {
        let d = &self.dims;
        if d.embed == 0 || d.hidden == 0 || d.heads == 0 {
            return Err(FixtureError::InvalidSpec(
                "all dimensions must be positive".into(),
            ));
        }
        if !d.hidden.is_multiple_of(d.heads) {
            return Err(FixtureError::InvalidSpec(format!(
                "hidden ({}) must be divisible by heads ({})",
                d.hidden, d.heads
            )));
        }
        Ok(())
    }

    /// Key names and shapes, in the order they are generated.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.dims.hidden;
        let mut keys = vec![("text_embed.weight".to_string(), vec![self.dims.embed, h])];
        for i in 0..self.n_blocks {
            for proj in ["to_q", "to_k", "to_v", "to_out"] {
                keys.push((
                    format!("transformer_blocks.{i}.attn.{proj}.weight"),
                    vec![h, h],
                ));
            }
            keys.push((
                format!("transformer_blocks.{i}.ff.w1.weight"),
                vec![2 * h, h],
            ));
            keys.push((
                format!("transformer_blocks.{i}.ff.w2.weight"),
                vec![h, 2 * h],
            ));
            keys.push((format!("transformer_blocks.{i}.norm.weight"), vec![h]));
        }
        keys
    }
}

/// The topology that classifies this module's key grammar.
pub fn default_topology(n_blocks: usize) -> ModelTopology {
    ModelTopology::new(
        "transformer_blocks.{i}.",
        n_blocks.max(1),
        vec!["text_embed.".to_string()],
        None,
    )
    .expect("the built-in pattern is valid")
}

/// Infers the block count of a fixture-shaped checkpoint from its keys.
pub fn infer_n_blocks(ckpt: &Checkpoint) -> usize {
    let mut max_index: Option<u64> = None;
    for key in ckpt.keys() {
        if let Some(rest) = key.as_str().strip_prefix("transformer_blocks.") {
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if !digits.is_empty() && rest[digits.len()..].starts_with('.') {
                if let Ok(i) = digits.parse::<u64>() {
                    max_index = Some(max_index.map_or(i, |m| m.max(i)));
                }
            }
        }
    }
    max_index.map_or(0, |m| m as usize + 1)
}

/// Generates the base checkpoint: seeded Gaussian values with std 0.02,
/// bit-identical for a fixed `(spec, seed)`.
pub fn gen_base(spec: &FixtureSpec) -> Result<Checkpoint, FixtureError> {
    spec.validate()?;
    let mut ckpt = Checkpoint::new();
    for (name, shape) in spec.layout() {
        let stream = CounterRng::substream(spec.seed, &name);
        let numel: usize = shape.iter().product();
        let values: Vec<f32> = (0..numel as u64)
            .map(|i| (stream.gaussian(i) * 0.02) as f32)
            .collect();
        let tensor = Tensor::from_f32(spec.dtype, shape, &values)
            .expect("layout shapes match the value count");
        ckpt.insert(
            TensorKey::new(name).expect("generated names are valid"),
            tensor,
        );
    }
    ckpt.set_metadata("stylevec.fixture", "base");
    ckpt.set_metadata("stylevec.fixture.n_blocks", spec.n_blocks.to_string());
    ckpt.set_metadata("stylevec.fixture.seed", spec.seed.to_string());
    Ok(ckpt)
}

/// Which keys of the base a styled variant perturbs.
#[derive(Debug, Clone)]
pub enum VariantTarget {
    Keys(Vec<TensorKey>),
    Class(LayerClass),
}

/// Ground truth for a generated variant: exactly the deltas that were added.
#[derive(Debug, Clone)]
pub struct PlantLedger {
    pub style_label: String,
    pub deltas: BTreeMap<TensorKey, Tensor>,
}

impl PlantLedger {
    pub fn keys(&self) -> impl Iterator<Item = &TensorKey> {
        self.deltas.keys()
    }
}

/// Builds a "fine-tuned" variant of `base` by planting Gaussian deltas of
/// per-tensor Frobenius norm `magnitude` on the target keys. The ledger
/// records the exact planted tensors. A magnitude of 0 returns the base
/// unchanged with an empty ledger.
pub fn gen_styled_variant(
    base: &Checkpoint,
    target: &VariantTarget,
    magnitude: f64,
    seed: u64,
    style_label: impl Into<String>,
) -> Result<(Checkpoint, PlantLedger), FixtureError> {
    let style_label = style_label.into();
    let targets: Vec<TensorKey> = match target {
        VariantTarget::Keys(keys) => {
            for key in keys {
                if !base.contains(key) {
                    return Err(FixtureError::KeyNotFound(key.as_str().to_string()));
                }
            }
            keys.clone()
        }
        VariantTarget::Class(class) => {
            let topology = default_topology(infer_n_blocks(base));
            base.keys()
                .filter(|k| classify_layer(k, &topology).is_ok_and(|c| c == *class))
                .cloned()
                .collect()
        }
    };

    if magnitude == 0.0 {
        return Ok((
            base.clone(),
            PlantLedger {
                style_label,
                deltas: BTreeMap::new(),
            },
        ));
    }

    let mut variant = base.clone();
    let mut deltas = BTreeMap::new();
    for key in targets {
        let tensor = base.get(&key).expect("targets validated above");
        if tensor.numel() == 0 {
            continue;
        }
        let stream = CounterRng::substream(seed, &format!("delta:{}", key.as_str()));
        let raw: Vec<f64> = (0..tensor.numel() as u64)
            .map(|i| stream.gaussian(i))
            .collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = magnitude / norm;
        let values: Vec<f32> = raw.iter().map(|&x| (x * scale) as f32).collect();
        let delta = Tensor::from_f32(tensor.dtype(), tensor.shape().to_vec(), &values)
            .expect("same element count");
        let updated = axpy(tensor, &delta, 1.0).expect("layouts match by construction");
        variant.insert(key.clone(), updated);
        deltas.insert(key, delta);
    }

    Ok((
        variant,
        PlantLedger {
            style_label,
            deltas,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskvector::{build_task_vector, KeyAlignmentPolicy};
    use crate::tensor::frobenius_norm;

    fn spec(n_blocks: usize) -> FixtureSpec {
        FixtureSpec {
            n_blocks,
            dims: FixtureDims {
                embed: 8,
                hidden: 16,
                heads: 4,
            },
            dtype: Dtype::F32,
            seed: 42,
        }
    }

    #[test]
    fn key_count_matches_arithmetic() {
        let base = gen_base(&spec(4)).unwrap();
        assert_eq!(base.len(), 1 + 4 * 7);
    }

    #[test]
    fn zero_blocks_gives_only_the_embedding() {
        let base = gen_base(&spec(0)).unwrap();
        assert_eq!(base.len(), 1);
        assert!(base.contains(&TensorKey::new("text_embed.weight").unwrap()));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_base(&spec(3)).unwrap();
        let b = gen_base(&spec(3)).unwrap();
        assert_eq!(a, b);
        let c = gen_base(&FixtureSpec {
            seed: 43,
            ..spec(3)
        })
        .unwrap();
        assert!(!a.tensors_equal(&c));
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut s = spec(1);
        s.dims.heads = 3; // 16 % 3 != 0
        assert!(matches!(gen_base(&s), Err(FixtureError::InvalidSpec(_))));
        s.dims.heads = 0;
        assert!(gen_base(&s).is_err());
    }

    #[test]
    fn generated_keys_classify_without_errors() {
        for n_blocks in [1usize, 2, 3, 5] {
            let base = gen_base(&spec(n_blocks)).unwrap();
            let topology = default_topology(n_blocks);
            for key in base.keys() {
                let class = classify_layer(key, &topology).unwrap();
                assert_ne!(class, LayerClass::Other, "unclassified key {key}");
            }
        }
    }

    #[test]
    fn infer_n_blocks_reads_the_key_grammar() {
        assert_eq!(infer_n_blocks(&gen_base(&spec(5)).unwrap()), 5);
        assert_eq!(infer_n_blocks(&gen_base(&spec(0)).unwrap()), 0);
    }

    #[test]
    fn zero_magnitude_variant_is_the_base() {
        let base = gen_base(&spec(2)).unwrap();
        let (variant, ledger) = gen_styled_variant(
            &base,
            &VariantTarget::Class(LayerClass::EarlyBlock),
            0.0,
            7,
            "noop",
        )
        .unwrap();
        assert_eq!(variant, base);
        assert!(ledger.deltas.is_empty());
    }

    #[test]
    fn early_block_target_plants_exactly_blocks_zero_and_one() {
        let base = gen_base(&spec(4)).unwrap();
        let (_, ledger) = gen_styled_variant(
            &base,
            &VariantTarget::Class(LayerClass::EarlyBlock),
            0.5,
            11,
            "dialect",
        )
        .unwrap();
        assert_eq!(ledger.deltas.len(), 2 * 7);
        for key in ledger.keys() {
            assert!(
                key.as_str().starts_with("transformer_blocks.0.")
                    || key.as_str().starts_with("transformer_blocks.1."),
                "unexpected planted key {key}"
            );
        }
    }

    #[test]
    fn planted_norms_match_magnitude() {
        let base = gen_base(&spec(3)).unwrap();
        let magnitude = 0.5;
        let (variant, ledger) = gen_styled_variant(
            &base,
            &VariantTarget::Class(LayerClass::LateBlock),
            magnitude,
            3,
            "emotion",
        )
        .unwrap();
        let (tau, _) = build_task_vector(&variant, &base, KeyAlignmentPolicy::Strict).unwrap();
        for key in ledger.keys() {
            let norm = frobenius_norm(tau.get(key).unwrap());
            assert!(
                ((norm - magnitude) / magnitude).abs() < 1e-5,
                "{key}: norm {norm}"
            );
        }
    }

    #[test]
    fn task_vector_support_is_exactly_the_ledger() {
        let base = gen_base(&spec(4)).unwrap();
        let (variant, ledger) = gen_styled_variant(
            &base,
            &VariantTarget::Class(LayerClass::TextEmbedding),
            0.25,
            19,
            "style",
        )
        .unwrap();
        let (tau, _) = build_task_vector(&variant, &base, KeyAlignmentPolicy::Strict).unwrap();
        for (key, delta) in tau.entries() {
            if ledger.deltas.contains_key(key) {
                assert!(!delta.is_all_zero(), "{key} should carry a delta");
            } else {
                assert!(delta.is_all_zero(), "{key} should be untouched");
            }
        }
    }

    #[test]
    fn explicit_key_targets_are_validated() {
        let base = gen_base(&spec(1)).unwrap();
        let missing = TensorKey::new("nope.weight").unwrap();
        assert!(matches!(
            gen_styled_variant(&base, &VariantTarget::Keys(vec![missing]), 0.1, 0, "x"),
            Err(FixtureError::KeyNotFound(_))
        ));
    }
}
