//! Dense tensor values and the numeric kernels everything else builds on.
//!
//! Tensors are immutable after construction: little-endian row-major bytes
//! plus a dtype and shape. All elementwise arithmetic loads elements to f32,
//! accumulates in f32, and rounds back to the storage dtype with
//! round-to-nearest-even; norms and other reductions accumulate in f64.
//! That makes every result a pure function of the inputs, independent of
//! element order and thread count.

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Storage dtypes supported by checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    /// Bytes per element.
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    /// Container-format name.
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("dtype mismatch: expected {expected}, got {got}")]
    DtypeMismatch { expected: Dtype, got: Dtype },
    #[error("scale must be finite, got {0}")]
    NonFiniteScale(f64),
    #[error("buffer of {got} bytes does not fit shape {shape:?} of {dtype} ({expected} bytes)")]
    BufferSize {
        dtype: Dtype,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// A dense row-major tensor. Scalars have an empty shape; zero dimensions
/// are legal and yield empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Tensor, TensorError> {
        let expected = shape.iter().product::<usize>() * dtype.byte_width();
        if data.len() != expected {
            return Err(TensorError::BufferSize {
                dtype,
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Builds a tensor from f32 values, rounding to the storage dtype.
    pub fn from_f32(
        dtype: Dtype,
        shape: Vec<usize>,
        values: &[f32],
    ) -> Result<Tensor, TensorError> {
        let numel = shape.iter().product::<usize>();
        if values.len() != numel {
            return Err(TensorError::BufferSize {
                dtype,
                shape,
                expected: numel * dtype.byte_width(),
                got: values.len() * dtype.byte_width(),
            });
        }
        let mut data = Vec::with_capacity(numel * dtype.byte_width());
        match dtype {
            Dtype::F32 => {
                for &v in values {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in values {
                    data.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                }
            }
            Dtype::BF16 => {
                for &v in values {
                    data.extend_from_slice(&bf16::from_f32(v).to_le_bytes());
                }
            }
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            dtype,
            shape,
            data: vec![0u8; numel * dtype.byte_width()],
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn raw_data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw_data(self) -> Vec<u8> {
        self.data
    }

    /// Same data, new shape. The element count must not change.
    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: shape,
            });
        }
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data.clone(),
        })
    }

    /// Decodes the buffer to f32. Exact for all three dtypes.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// True when every element is exactly zero (either sign).
    pub fn is_all_zero(&self) -> bool {
        self.to_f32_vec().iter().all(|&v| v == 0.0)
    }

    fn check_same_layout(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        if self.dtype != other.dtype {
            return Err(TensorError::DtypeMismatch {
                expected: self.dtype,
                got: other.dtype,
            });
        }
        Ok(())
    }
}

/// Adds `scale * delta[i]` into an f32 accumulator buffer. Shared by axpy
/// and the merge executor so a one-input merge is bit-identical to a direct
/// apply.
pub(crate) fn accumulate_scaled(acc: &mut [f32], delta: &Tensor, scale: f32) {
    let d = delta.to_f32_vec();
    debug_assert_eq!(acc.len(), d.len());
    for (a, &x) in acc.iter_mut().zip(d.iter()) {
        *a += scale * x;
    }
}

/// Elementwise `a - b`, computed in f32 and rounded back to the input dtype.
pub fn elementwise_sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    a.check_same_layout(b)?;
    let av = a.to_f32_vec();
    let bv = b.to_f32_vec();
    let out: Vec<f32> = av.iter().zip(bv.iter()).map(|(&x, &y)| x - y).collect();
    Tensor::from_f32(a.dtype, a.shape.clone(), &out)
}

/// `base + scale * delta`, f32 accumulation, rounded back to the input dtype.
///
/// A scale of exactly 0.0 short-circuits to a bit-identical copy of `base`,
/// so a zero coefficient is an exact identity rather than a -0.0-producing
/// no-op.
pub fn axpy(base: &Tensor, delta: &Tensor, scale: f64) -> Result<Tensor, TensorError> {
    if !scale.is_finite() {
        return Err(TensorError::NonFiniteScale(scale));
    }
    base.check_same_layout(delta)?;
    if scale == 0.0 {
        return Ok(base.clone());
    }
    let mut acc = base.to_f32_vec();
    accumulate_scaled(&mut acc, delta, scale as f32);
    Tensor::from_f32(base.dtype, base.shape.clone(), &acc)
}

/// Matrix product `b[d x r] * a[r x k] -> [d x k]`, f32 accumulation.
/// The output is always F32 regardless of input dtypes.
pub fn matmul(b: &Tensor, a: &Tensor) -> Result<Tensor, TensorError> {
    if b.shape.len() != 2 || a.shape.len() != 2 || b.shape[1] != a.shape[0] {
        return Err(TensorError::ShapeMismatch {
            expected: b.shape.clone(),
            got: a.shape.clone(),
        });
    }
    let (d, r) = (b.shape[0], b.shape[1]);
    let k = a.shape[1];
    let bv = b.to_f32_vec();
    let av = a.to_f32_vec();
    let mut out = vec![0.0f32; d * k];
    for i in 0..d {
        for l in 0..r {
            let bil = bv[i * r + l];
            if bil == 0.0 {
                continue;
            }
            let arow = &av[l * k..(l + 1) * k];
            let orow = &mut out[i * k..(i + 1) * k];
            for (o, &x) in orow.iter_mut().zip(arow.iter()) {
                *o += bil * x;
            }
        }
    }
    Tensor::from_f32(Dtype::F32, vec![d, k], &out)
}

/// Round-to-nearest-even conversion through f32. Overflow saturates to the
/// infinity of the target dtype; casting to the same dtype is bit-identical.
pub fn cast(t: &Tensor, target: Dtype) -> Tensor {
    if t.dtype == target {
        return t.clone();
    }
    let values = t.to_f32_vec();
    Tensor::from_f32(target, t.shape.clone(), &values)
        .expect("element count is unchanged by casting")
}

/// Frobenius norm: sqrt of the sum of squared elements, accumulated in f64.
/// The empty tensor has norm 0.
pub fn frobenius_norm(t: &Tensor) -> f64 {
    let mut acc = 0.0f64;
    for v in t.to_f32_vec() {
        let v = v as f64;
        acc += v * v;
    }
    acc.sqrt()
}

/// Spacing between representable values of `dtype` at the given magnitude,
/// with the subnormal quantum as a floor. Used to express ulp-denominated
/// tolerances that stay meaningful under cancellation.
pub fn ulp_spacing(dtype: Dtype, magnitude: f64) -> f64 {
    let (mant_bits, min_exp) = match dtype {
        Dtype::F32 => (23i32, -126i32),
        Dtype::F16 => (10, -14),
        Dtype::BF16 => (7, -126),
    };
    let m = magnitude.abs();
    let exp = if m == 0.0 || !m.is_finite() {
        min_exp
    } else {
        (m.log2().floor() as i32).max(min_exp)
    };
    (2.0f64).powi(exp - mant_bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], vals: &[f32]) -> Tensor {
        Tensor::from_f32(Dtype::F32, shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn sub_basic() {
        let a = t32(&[1, 2], &[1.5, 2.0]);
        let b = t32(&[1, 2], &[0.5, 2.0]);
        let d = elementwise_sub(&a, &b).unwrap();
        assert_eq!(d.to_f32_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        for dtype in [Dtype::F32, Dtype::F16, Dtype::BF16] {
            let vals: Vec<f32> = (0..17).map(|i| (i as f32 - 8.0) * 0.37).collect();
            let a = Tensor::from_f32(dtype, vec![17], &vals).unwrap();
            let d = elementwise_sub(&a, &a).unwrap();
            assert!(d.is_all_zero());
        }
    }

    #[test]
    fn sub_shape_and_dtype_errors() {
        let a = t32(&[2], &[1.0, 2.0]);
        let b = t32(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            elementwise_sub(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let c = Tensor::from_f32(Dtype::F16, vec![2], &[1.0, 2.0]).unwrap();
        assert!(matches!(
            elementwise_sub(&a, &c),
            Err(TensorError::DtypeMismatch { .. })
        ));
    }

    // f16 subtraction must agree with an oracle that computes in wide
    // precision and rounds once: f32 has enough bits (>= 2*11 + 2) that the
    // double rounding through it is innocuous.
    #[test]
    fn sub_f16_matches_f64_oracle() {
        let rng = crate::rng::CounterRng::new(902);
        let n = 64;
        let av: Vec<f32> = (0..n).map(|i| rng.gaussian(i) as f32).collect();
        let bv: Vec<f32> = (0..n).map(|i| rng.gaussian(i + 1000) as f32).collect();
        let a = Tensor::from_f32(Dtype::F16, vec![n as usize], &av).unwrap();
        let b = Tensor::from_f32(Dtype::F16, vec![n as usize], &bv).unwrap();
        let d = elementwise_sub(&a, &b).unwrap();

        let af = a.to_f32_vec();
        let bf = b.to_f32_vec();
        let got = d.to_f32_vec();
        for i in 0..n as usize {
            let exact = af[i] as f64 - bf[i] as f64;
            let want = f16::from_f64(exact).to_f32();
            assert_eq!(got[i], want, "element {i}: {} - {}", af[i], bf[i]);
        }
    }

    #[test]
    fn axpy_basic() {
        let base = t32(&[1], &[1.0]);
        let delta = t32(&[1], &[2.0]);
        let r = axpy(&base, &delta, 3.0).unwrap();
        assert_eq!(r.to_f32_vec(), vec![7.0]);
    }

    #[test]
    fn axpy_zero_scale_is_bit_identical() {
        let rng = crate::rng::CounterRng::new(3);
        let vals: Vec<f32> = (0..33).map(|i| rng.gaussian(i) as f32).collect();
        let base = Tensor::from_f32(Dtype::BF16, vec![33], &vals).unwrap();
        let delta = Tensor::from_f32(Dtype::BF16, vec![33], &vals).unwrap();
        let r = axpy(&base, &delta, 0.0).unwrap();
        assert_eq!(r, base);
        // -0.0 compares equal to 0.0, so it short-circuits too.
        let r = axpy(&base, &delta, -0.0).unwrap();
        assert_eq!(r, base);
    }

    #[test]
    fn axpy_rejects_non_finite_scale() {
        let base = t32(&[1], &[1.0]);
        assert!(matches!(
            axpy(&base, &base, f64::NAN),
            Err(TensorError::NonFiniteScale(_))
        ));
        assert!(matches!(
            axpy(&base, &base, f64::INFINITY),
            Err(TensorError::NonFiniteScale(_))
        ));
    }

    // Scalar oracle in f64, rounded once to f32. The f32 path may differ by
    // one rounding step at the scale of the operands.
    #[test]
    fn axpy_f32_matches_scalar_oracle() {
        let rng = crate::rng::CounterRng::new(77);
        let n = 128usize;
        let bv: Vec<f32> = (0..n as u64).map(|i| rng.gaussian(i) as f32).collect();
        let dv: Vec<f32> = (0..n as u64)
            .map(|i| rng.gaussian(i + 500) as f32)
            .collect();
        let base = t32(&[n], &bv);
        let delta = t32(&[n], &dv);
        let scale = 3.0;
        let r = axpy(&base, &delta, scale).unwrap();
        let got = r.to_f32_vec();
        for i in 0..n {
            let want = (bv[i] as f64 + scale * dv[i] as f64) as f32;
            let mag = (bv[i].abs() as f64)
                .max((scale * dv[i] as f64).abs())
                .max(want.abs() as f64);
            let tol = ulp_spacing(Dtype::F32, mag);
            assert!(
                (got[i] as f64 - want as f64).abs() <= tol,
                "element {i}: got {} want {want}",
                got[i]
            );
        }
    }

    #[test]
    fn axpy_reconstructs_sub_within_one_ulp() {
        for dtype in [Dtype::F32, Dtype::F16, Dtype::BF16] {
            let rng = crate::rng::CounterRng::new(5150);
            let n = 256usize;
            let av: Vec<f32> = (0..n as u64).map(|i| rng.gaussian(i) as f32).collect();
            let bv: Vec<f32> = (0..n as u64)
                .map(|i| (rng.gaussian(i) + 0.05 * rng.gaussian(i + 9000)) as f32)
                .collect();
            let a = Tensor::from_f32(dtype, vec![n], &av).unwrap();
            let b = Tensor::from_f32(dtype, vec![n], &bv).unwrap();
            let r = axpy(&a, &elementwise_sub(&b, &a).unwrap(), 1.0).unwrap();
            let rf = r.to_f32_vec();
            let af = a.to_f32_vec();
            let bf = b.to_f32_vec();
            for i in 0..n {
                let tol = ulp_spacing(dtype, (af[i].abs()).max(bf[i].abs()) as f64);
                assert!(
                    (rf[i] as f64 - bf[i] as f64).abs() <= tol,
                    "{dtype} element {i}: got {} want {}",
                    rf[i],
                    bf[i]
                );
            }
        }
    }

    #[test]
    fn matmul_outer_product() {
        let b = t32(&[2, 1], &[1.0, 0.0]);
        let a = t32(&[1, 2], &[2.0, 3.0]);
        let p = matmul(&b, &a).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert_eq!(p.to_f32_vec(), vec![2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t32(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = matmul(&eye, &a).unwrap();
        assert_eq!(p.to_f32_vec(), a.to_f32_vec());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let rng = crate::rng::CounterRng::new(417);
        let (d, r, k) = (8usize, 4usize, 6usize);
        let bv: Vec<f32> = (0..(d * r) as u64)
            .map(|i| rng.gaussian(i) as f32)
            .collect();
        let av: Vec<f32> = (0..(r * k) as u64)
            .map(|i| rng.gaussian(i + 10_000) as f32)
            .collect();
        let b = t32(&[d, r], &bv);
        let a = t32(&[r, k], &av);
        let p = matmul(&b, &a).unwrap();
        let got = p.to_f32_vec();
        for i in 0..d {
            for j in 0..k {
                let mut want = 0.0f64;
                for l in 0..r {
                    want += bv[i * r + l] as f64 * av[l * k + j] as f64;
                }
                let g = got[i * k + j] as f64;
                let denom = want.abs().max(1e-12);
                assert!(
                    ((g - want) / denom).abs() < 1e-5,
                    "({i},{j}): got {g} want {want}"
                );
            }
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let b = t32(&[2, 3], &[0.0; 6]);
        let a = t32(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            matmul(&b, &a),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_zero_dimension() {
        let b = t32(&[0, 5], &[]);
        let a = t32(&[5, 3], &[0.0; 15]);
        let p = matmul(&b, &a).unwrap();
        assert_eq!(p.shape(), &[0, 3]);
        assert_eq!(p.numel(), 0);
    }

    #[test]
    fn cast_basic_and_identity() {
        let t = t32(&[1], &[1.0]);
        let h = cast(&t, Dtype::F16);
        assert_eq!(h.to_f32_vec(), vec![1.0]);
        let same = cast(&t, Dtype::F32);
        assert_eq!(same, t);
    }

    #[test]
    fn cast_overflow_saturates_to_infinity() {
        // 65520 is exactly halfway between the f16 max (65504) and 2^16;
        // round-to-nearest-even sends it up, which overflows to +inf.
        let t = t32(&[2], &[65520.0, -65520.0]);
        let h = cast(&t, Dtype::F16);
        let v = h.to_f32_vec();
        assert_eq!(v[0], f32::INFINITY);
        assert_eq!(v[1], f32::NEG_INFINITY);
    }

    #[test]
    fn cast_is_idempotent() {
        let rng = crate::rng::CounterRng::new(88);
        let vals: Vec<f32> = (0..50).map(|i| (rng.gaussian(i) * 100.0) as f32).collect();
        let t = t32(&[50], &vals);
        for dtype in [Dtype::F16, Dtype::BF16, Dtype::F32] {
            let once = cast(&t, dtype);
            let twice = cast(&once, dtype);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn frobenius_norm_cases() {
        assert_eq!(frobenius_norm(&t32(&[2], &[3.0, 4.0])), 5.0);
        assert_eq!(frobenius_norm(&Tensor::zeros(Dtype::F32, vec![7])), 0.0);
        assert_eq!(frobenius_norm(&t32(&[0], &[])), 0.0);
    }

    #[test]
    fn frobenius_norm_matches_f64_oracle() {
        let rng = crate::rng::CounterRng::new(31);
        let vals: Vec<f32> = (0..100).map(|i| rng.gaussian(i) as f32).collect();
        let t = t32(&[100], &vals);
        let got = frobenius_norm(&t);
        let want = vals
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        assert!(((got - want) / want).abs() < 1e-6);
    }

    #[test]
    fn scalar_and_empty_shapes() {
        let scalar = t32(&[], &[2.5]);
        assert_eq!(scalar.numel(), 1);
        let empty = t32(&[2, 0], &[]);
        assert_eq!(empty.numel(), 0);
        let d = elementwise_sub(&empty, &empty).unwrap();
        assert_eq!(d.numel(), 0);
    }

    #[test]
    fn buffer_size_is_enforced() {
        assert!(matches!(
            Tensor::new(Dtype::F32, vec![2], vec![0u8; 7]),
            Err(TensorError::BufferSize { .. })
        ));
    }
}
