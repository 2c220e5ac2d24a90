//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! The primitive set is deliberately small: it covers exactly what a
//! pre-norm decoder block needs (affine maps, layer norm, GELU, batched
//! attention products, masked softmax) plus a few gather/concat helpers
//! for assembling thought tokens. Broadcasting is limited to bias and
//! mask addition.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, numeric_gradient};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type. `f32` for training and inference,
/// `f64` for gradient checks.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `c += a · b` for strided row/column layouts, `a` being `m×k` and `b`
    /// being `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_s: [usize; 2], b: &[Self], b_s: [usize; 2], c: &mut [Self], c_s: [usize; 2]);
}

fn check_extent(len: usize, rows: usize, cols: usize, s: [usize; 2]) {
    assert!(rows == 0 || cols == 0 || (rows - 1) * s[0] + (cols - 1) * s[1] < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[$t], a_s: [usize; 2], b: &[$t], b_s: [usize; 2], c: &mut [$t], c_s: [usize; 2]) {
                check_extent(a.len(), m, k, a_s);
                check_extent(b.len(), k, n, b_s);
                check_extent(c.len(), m, n, c_s);
                // SAFETY: every index reached by the strides is in bounds (checked above)
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), a_s[0] as isize, a_s[1] as isize,
                        b.as_ptr(), b_s[0] as isize, b_s[1] as isize,
                        1.0,
                        c.as_mut_ptr(), c_s[0] as isize, c_s[1] as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// An n-dimensional dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![rows.len(), cols],
                rhs: rows.iter().map(Vec::len).collect(),
            });
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    /// `self · rhs` for 2-D operands, without recording anything.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

/// Row-wise softmax of `scores` (rows of length `n`) after adding an
/// additive mask of `0` / `-inf` entries, with max subtraction.
///
/// `mask` has `rows_per_group * n` entries and is broadcast over every
/// group of `rows_per_group` rows.
pub fn masked_softmax<F: Real>(
    scores: &[F],
    mask: &[F],
    n: usize,
    out: &mut [F],
) -> Result<()> {
    let rows_per_group = mask.len() / n;
    if n == 0 || mask.len() % n != 0 || scores.len() % mask.len() != 0 || out.len() != scores.len()
    {
        return Err(Error::Shape {
            op: "masked_softmax",
            lhs: vec![scores.len()],
            rhs: vec![mask.len(), n],
        });
    }
    for (row, (src, dst)) in scores.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let m = &mask[(row % rows_per_group) * n..][..n];
        let mut max = F::neg_infinity();
        for (&s, &mk) in src.iter().zip(m) {
            if mk != F::neg_infinity() && s + mk > max {
                max = s + mk;
            }
        }
        if max == F::neg_infinity() {
            return Err(Error::FullyMasked { row });
        }
        let mut total = F::zero();
        for ((d, &s), &mk) in dst.iter_mut().zip(src).zip(m) {
            *d = if mk == F::neg_infinity() {
                F::zero()
            } else {
                (s + mk - max).exp()
            };
            total += *d;
        }
        let inv = total.recip();
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(())
}

/// GELU, tanh approximation (GPT-2 form):
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let half = F::of(0.5);
    half * x * (F::one() + tanh(c * (x + F::of(0.044715) * x * x * x)))
}

/// `tanh` through one `exp`, noticeably cheaper than the libm routine.
#[inline]
fn tanh<F: Real>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = tanh(inner);
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + F::of(3.0) * a * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standardize each row of length `d` and apply `gain`/`bias`.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], eps: F, out: &mut [F]) {
    let d = gain.len();
    let inv_d = F::of(1.0 / d as f64);
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = src.iter().copied().sum::<F>() * inv_d;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for i in 0..d {
            dst[i] = (src[i] - mean) * rstd * gain[i] + bias[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = Tensor::<f64>::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap().data(), &[5., 6., 7., 8.]);
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = naive_matmul(&a, &b, 5, 4, 3);
        let got = Tensor::new(&[5, 4], a)
            .unwrap()
            .matmul(&Tensor::new(&[4, 3], b).unwrap())
            .unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_and_single_entry() {
        let mut out = [0.0f64; 4];
        masked_softmax(&[0.3; 4], &[0.0; 4], 4, &mut out).unwrap();
        assert_eq!(out, [0.25; 4]);
        let mut out = [0.0f64; 3];
        let ninf = f64::NEG_INFINITY;
        masked_softmax(&[0.0; 3], &[0.0, ninf, ninf], 3, &mut out).unwrap();
        assert_eq!(out, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let ninf = f32::NEG_INFINITY;
        let mut out = [0.0f32; 2];
        let err = masked_softmax(&[1.0, 2.0], &[ninf, ninf], 2, &mut out).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 0 }));
    }

    #[test]
    fn softmax_matches_direct_exponentials() {
        let scores = [0.3f64, -1.2, 2.5, 0.0, 0.7];
        let mut out = [0.0; 5];
        masked_softmax(&scores, &[0.0; 5], 5, &mut out).unwrap();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for (o, s) in out.iter().zip(&scores) {
            assert!((o - s.exp() / total).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu_limits() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-4);
        assert!(gelu(-10.0f64).abs() < 1e-4);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut out = [1.0f64; 3];
        layer_norm(&[2.5; 3], &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS, &mut out);
        assert_eq!(out, [0.0; 3]);
        let mut out = [0.0f64; 2];
        layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0, &mut out);
        assert_eq!(out, [1.0, -1.0]);
    }

    #[test]
    fn layer_norm_random_row_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut out = vec![0.0; 32];
        layer_norm(&x, &[1.0; 32], &[0.0; 32], LAYER_NORM_EPS, &mut out);
        let mean = out.iter().sum::<f64>() / 32.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
