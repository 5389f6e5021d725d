//! Row-major matrix products.
//!
//! In the plain and transposed-`A` products every output element accumulates
//! its products in ascending `k` order and rows are processed independently,
//! so a row's result never depends on the other rows in the batch. The AVX2
//! path only widens the vectorization over columns (no fused multiply-add),
//! so it is bit-identical to the portable one.

use super::Real;

/// Column panel width; keeps the touched parts of `B` and `C` cache resident.
const NB: usize = 256;

#[inline(always)]
fn nn_kernel<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n + j0..p * n + j1];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj = *cj + av * bj;
                }
            }
        }
    }
}

#[inline(always)]
fn tn_kernel<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n + j0..p * n + j1];
            for (i, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let crow = &mut c[i * n + j0..i * n + j1];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj = *cj + av * bj;
                }
            }
        }
    }
}

/// Dot product over 32 independent lanes with a fixed reduction order.
#[inline(always)]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    const L: usize = 32;
    let mut acc = [T::zero(); L];
    let chunks = x.len() / L;
    for c in 0..chunks {
        let (xs, ys) = (&x[c * L..c * L + L], &y[c * L..c * L + L]);
        for l in 0..L {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for t in chunks * L..x.len() {
        tail = tail + x[t] * y[t];
    }
    let mut width = L;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    acc[0] + tail
}

#[inline(always)]
fn nt_kernel<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nt_avx2<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    nt_kernel(m, n, k, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nn_avx2<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    nn_kernel(m, n, k, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tn_avx2<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    tn_kernel(m, n, k, a, b, c)
}

/// `C (m x n) += A (m x k) * B (k x n)`.
pub(crate) fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { nn_avx2(m, n, k, a, b, c) };
        return;
    }
    nn_kernel(m, n, k, a, b, c)
}

/// `C (m x n) += A^T * B` with `A` stored `k x m` and `B` stored `k x n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { tn_avx2(m, n, k, a, b, c) };
        return;
    }
    tn_kernel(m, n, k, a, b, c)
}

/// `C (m x n) += A (m x k) * B^T` with `B` stored `n x k`. Each entry is a
/// lane-split dot product, so unlike the other two products the summation
/// order is not plain ascending `k`; it is still fixed and deterministic.
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { nt_avx2(m, n, k, a, b, c) };
        return;
    }
    nt_kernel(m, n, k, a, b, c)
}

/// Transpose of a `rows x cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
