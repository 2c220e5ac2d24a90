//! Row-major GEMM entry points and small vector kernels.

use super::Real;

/// `c += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    F::gemm_acc(m, k, n, a, [k, 1], b, [n, 1], c, [n, 1]);
}

/// `c += a[m×k]ᵀ · b[m×n]`, giving `c[k×n]`.
pub fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
    F::gemm_acc(k, m, n, a, [1, k], b, [n, 1], c, [n, 1]);
}

/// `c += a[m×k] · b[n×k]ᵀ`, giving `c[m×n]`.
pub fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    F::gemm_acc(m, k, n, a, [k, 1], b, [1, k], c, [n, 1]);
}

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// `y[n] += x[k] · w[k×n]`
#[inline]
pub fn vecmat<F: Real>(x: &[F], w: &[F], y: &mut [F]) {
    let n = y.len();
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (yv, &wv) in y.iter_mut().zip(wrow) {
            *yv += xv * wv;
        }
    }
}
