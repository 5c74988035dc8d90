//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! Cyclic sweeps orthogonalize the columns of the working matrix in a fixed
//! order, so the factorization is deterministic: no pivot heuristics, no
//! platform LAPACK. Accuracy is excellent for the modest matrices that
//! low-rank extraction deals with; cost is O(m n^2) per sweep.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SvdError {
    #[error("Jacobi sweeps did not converge within {0} iterations")]
    NonConvergence(usize),
}

/// Thin SVD of an `m x n` row-major matrix: `a = u * diag(s) * vt` with
/// `u: m x p`, `s: p`, `vt: p x n` where `p = min(m, n)`. Singular values
/// are sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

const MAX_SWEEPS: usize = 64;
// Rotation threshold on the normalized column correlation. Rounding in the
// pair rotations reintroduces correlations near 1e-15 on tiny columns, so
// anything tighter can cycle; 1e-12 leaves singular values accurate to
// O(1e-24) relative, far beyond what the callers' data resolves.
const ORTHO_TOL: f64 = 1e-12;
// Columns whose squared norm falls below this fraction of the largest are
// numerically zero singular values. Rotating them against the dominant
// columns keeps injecting parallel rounding residue and never settles, so
// they are treated as converged.
const NEGLIGIBLE_COL_SQ: f64 = 1e-30;

/// Computes the thin SVD of `a` (row-major, `m x n`).
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> Result<Svd, SvdError> {
    assert_eq!(a.len(), m * n, "matrix buffer does not match dimensions");
    if m >= n {
        let (u, s, v) = one_sided(a, m, n)?;
        Ok(Svd {
            u,
            s,
            vt: transpose(&v, n, n),
            m,
            n,
        })
    } else {
        // SVD(A) = (SVD(A^T)) with U and V swapped.
        let at = transpose(a, m, n);
        let (u_t, s, v_t) = one_sided(&at, n, m)?;
        Ok(Svd {
            u: v_t,
            s,
            vt: transpose(&u_t, n, m),
            m,
            n,
        })
    }
}

/// (u, s, v) buffers from the one-sided sweep.
type Factors = (Vec<f64>, Vec<f64>, Vec<f64>);

/// One-sided Jacobi for `m >= n`. Returns (`u`: m x n, `s`: n, `v`: n x n)
/// with columns of `u` orthonormal (zero columns for zero singular values).
fn one_sided(a: &[f64], m: usize, n: usize) -> Result<Factors, SvdError> {
    // Column-major working copies keep the rotations cache-friendly.
    let mut w = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[i * n + j];
        }
    }
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= MAX_SWEEPS {
            return Err(SvdError::NonConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        converged = true;
        let floor = NEGLIGIBLE_COL_SQ
            * (0..n)
                .map(|j| w[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>())
                .fold(0.0f64, f64::max);
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (mut app, mut aqq, mut apq) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..m {
                    let wp = w[p * m + i];
                    let wq = w[q * m + i];
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if app <= floor || aqq <= floor || apq.abs() <= ORTHO_TOL * (app * aqq).sqrt() {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[p * m + i];
                    let wq = w[q * m + i];
                    w[p * m + i] = c * wp - s * wq;
                    w[q * m + i] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[p * n + i];
                    let vq = v[q * n + i];
                    v[p * n + i] = c * vp - s * vq;
                    v[q * n + i] = s * vp + c * vq;
                }
            }
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| {
            let col = &w[j * m..(j + 1) * m];
            col.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();

    // Descending order; index as tiebreaker keeps the permutation stable.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let mut u = vec![0.0f64; m * n];
    let mut v_sorted = vec![0.0f64; n * n];
    let mut s = vec![0.0f64; n];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        if norms[src] > 0.0 {
            for i in 0..m {
                u[i * n + dst] = w[src * m + i] / norms[src];
            }
        }
        for i in 0..n {
            v_sorted[i * n + dst] = v[src * n + i];
        }
    }
    Ok((u, s, v_sorted))
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
