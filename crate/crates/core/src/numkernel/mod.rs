//! Dense numeric kernel: products, row softmax, norms, cosine similarity and
//! seeded matrix generation.
//!
//! The scalar width is chosen at build time. The default is `f32`; enabling
//! the `f64` feature switches every kernel to double precision, which the
//! test suites use as a high-precision reference mode.
//!
//! Matrix products are delegated to `matrixmultiply` (single-threaded, fixed
//! blocking, so results are bit-reproducible run to run). Each product
//! records `2·m·k·n` operations with [`flops`]; nothing else is counted.

pub mod flops;
mod matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use matrix::Matrix;

use crate::error::{Error, Result};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Norm below which a vector is treated as zero by [`cosine_sim`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Strided operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [Real],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Operand<'a> {
    pub fn row_major(data: &'a [Real], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Row-major storage with `cols` columns read as its transpose.
    pub fn transposed(data: &'a [Real], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "operand view exceeds its buffer");
    }
}

/// `c = alpha·a·b + beta·c` over strided views, with `a` of shape `m×k`,
/// `b` of shape `k×n` and `c` row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: Operand<'_>,
    b: Operand<'_>,
    beta: Real,
    c: &mut [Real],
    ldc: usize,
) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        assert!(
            (m - 1) * ldc + n <= c.len(),
            "output view exceeds its buffer"
        );
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is uniquely borrowed.
    unsafe {
        raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
    flops::record(flops::matmul_flops(m, k, n));
}

#[cfg(feature = "f64")]
use matrixmultiply::dgemm as raw_gemm;
#[cfg(not(feature = "f64"))]
use matrixmultiply::sgemm as raw_gemm;

/// Standard matrix product `a·b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    gemm(
        m,
        k,
        n,
        1.0,
        Operand::row_major(a.data(), k),
        Operand::row_major(b.data(), n),
        0.0,
        out.data_mut(),
        n,
    );
    debug_assert!(out.is_finite() || !(a.is_finite() && b.is_finite()));
    Ok(out)
}

/// `a·bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul_transposed {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Matrix::zeros(m, n);
    gemm(
        m,
        k,
        n,
        1.0,
        Operand::row_major(a.data(), k),
        Operand::transposed(b.data(), k),
        0.0,
        out.data_mut(),
        n,
    );
    Ok(out)
}

/// In-place stabilized softmax over each `cols`-wide row of `buf`.
pub(crate) fn softmax_rows_in_place(buf: &mut [Real], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in buf.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as Real;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    softmax_rows_in_place(out.data_mut(), m.cols());
    out
}

/// Euclidean norm, accumulated in 64-bit.
pub fn l2_norm(x: &[Real]) -> f64 {
    x.iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub(crate) fn dot_f64(x: &[Real], y: &[Real]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Cosine similarity from a dot product and the two norms. Zero when either
/// norm is below [`DEGENERATE_NORM`].
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_x: f64, norm_y: f64) -> f64 {
    if norm_x < DEGENERATE_NORM || norm_y < DEGENERATE_NORM {
        0.0
    } else {
        dot / (norm_x * norm_y)
    }
}

/// `x·y / (‖x‖‖y‖)`, or 0 for a (near) zero vector.
pub fn cosine_sim(x: &[Real], y: &[Real]) -> Result<Real> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cosine_sim lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(cosine_from_parts(dot_f64(x, y), l2_norm(x), l2_norm(y)) as Real)
}

/// Seeded ChaCha8 stream. All randomness in the crate flows through here.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic `rows×cols` matrix with i.i.d. normal entries of mean 0 and
/// standard deviation `1/√cols`, drawn from a ChaCha8 stream seeded by `seed`.
pub fn prng_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as Real
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}
