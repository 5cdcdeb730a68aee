//! Raw slice kernels shared by the eager tensor API and the tape.

use super::{Metric, Real};
use crate::error::{Error, Result};

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), m * k, k * n, m * n);
    // SAFETY: lengths checked above; row-major strides stay in bounds
    unsafe { T::gemm_acc(m, k, n, a, [k as isize, 1], b, [n as isize, 1], out) }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), m * k, n * k, m * n);
    // SAFETY: as above, with `b` read column-major
    unsafe { T::gemm_acc(m, k, n, a, [k as isize, 1], b, [1, k as isize], out) }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    check_gemm(a.len(), b.len(), out.len(), k * m, k * n, m * n);
    // SAFETY: as above, with `a` read column-major
    unsafe { T::gemm_acc(m, k, n, a, [1, m as isize], b, [n as isize, 1], out) }
}

fn check_gemm(a: usize, b: usize, c: usize, ea: usize, eb: usize, ec: usize) {
    assert!(a == ea && b == eb && c == ec, "gemm operand sizes");
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Symmetric `[n, n]` distance matrix with an exactly zero diagonal.
pub(crate) fn pairwise_distances<T: Real>(
    x: &[T],
    n: usize,
    d: usize,
    metric: Metric,
) -> Result<Vec<T>> {
    let rows: Vec<&[T]> = x.chunks_exact(d).collect();
    let mut out = vec![T::zero(); n * n];
    let norms = match metric {
        Metric::Cosine => {
            let norms: Vec<T> = rows.iter().map(|r| norm(r)).collect();
            if let Some(i) = norms.iter().position(|&v| v == T::zero()) {
                return Err(Error::input(format!(
                    "row {i} has zero norm under cosine distance"
                )));
            }
            norms
        }
        Metric::Euclidean => Vec::new(),
    };
    for i in 0..n {
        for j in (i + 1)..n {
            let v = match metric {
                Metric::Euclidean => rows[i]
                    .iter()
                    .zip(rows[j])
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                    .sqrt(),
                Metric::Cosine => T::one() - dot(rows[i], rows[j]) / (norms[i] * norms[j]),
            };
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// Gradient of the distance matrix w.r.t. the input rows.
pub(crate) fn pairwise_distances_backward<T: Real>(
    x: &[T],
    dist: &[T],
    g: &[T],
    n: usize,
    d: usize,
    metric: Metric,
) -> Vec<T> {
    let mut gx = vec![T::zero(); n * d];
    match metric {
        Metric::Euclidean => {
            for i in 0..n {
                for j in 0..n {
                    let dij = dist[i * n + j];
                    let gij = g[i * n + j];
                    if i == j || dij <= T::epsilon() || gij == T::zero() {
                        continue;
                    }
                    let coef = gij / dij;
                    for c in 0..d {
                        let diff = coef * (x[i * d + c] - x[j * d + c]);
                        gx[i * d + c] += diff;
                        gx[j * d + c] -= diff;
                    }
                }
            }
        }
        Metric::Cosine => {
            let norms: Vec<T> = x.chunks_exact(d).map(norm).collect();
            for i in 0..n {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if i == j || gij == T::zero() {
                        continue;
                    }
                    let s = T::one() - dist[i * n + j];
                    for c in 0..d {
                        let yi = x[i * d + c] / norms[i];
                        let yj = x[j * d + c] / norms[j];
                        gx[i * d + c] -= gij * (yj - s * yi) / norms[i];
                        gx[j * d + c] -= gij * (yi - s * yj) / norms[j];
                    }
                }
            }
        }
    }
    gx
}
