//! Dense row-major tensors and the handful of kernels the layers need.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Element type tag, used by the checkpoint container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element. Gradient checks run in `f64`; training may use `f32`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` constant. Never fails for finite input.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A * B + beta * C` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// regions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense N-dimensional array, row-major, every extent positive.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(dim_err!("tensor needs at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(dim_err!("extent {pos} of shape {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {len} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(dim_err!(
                "expected [batch, channels, height, width], got {:?}",
                self.shape
            )),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.data.len() / self.shape[0];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(dim_err!("dot of {:?} and {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `what` if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_impl(self, false, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        matmul_impl(self, false, other, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        matmul_impl(self, true, other, false)
    }
}

/// Rows handed to one rayon task when the gemm is split.
const GEMM_ROW_CHUNK: usize = 256;

/// `C = op(A) · op(B)` with `C` freshly allocated.
///
/// With more than one rayon thread the output rows are split into fixed-size
/// chunks. Every output element is accumulated in the same order regardless
/// of how the chunks are scheduled, so results are bitwise reproducible.
fn matmul_impl<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(dim_err!(
            "matmul inner dimensions differ: {:?}{} · {:?}{}",
            a.shape,
            if ta { "ᵀ" } else { "" },
            b.shape,
            if tb { "ᵀ" } else { "" }
        ));
    }
    let (rsa, csa) = if ta {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    let mut out = vec![T::zero(); m * n];
    gemm_into(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut out);
    Tensor::new(&[m, n], out)
}

/// Row-major `out[m×n] = A · B` for strided `A` (`m×k`) and `B` (`k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    let run = |row0: usize, chunk: &mut [T]| {
        let rows = chunk.len() / n;
        // SAFETY: the offsets stay inside `a` because row0 + rows <= m, and the
        // strides describe the caller's matrix layout; `chunk` is disjoint.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    };
    if rayon::current_num_threads() > 1 && m >= 2 * GEMM_ROW_CHUNK {
        out.par_chunks_mut(GEMM_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| run(i * GEMM_ROW_CHUNK, chunk));
    } else {
        run(0, out);
    }
}

/// Euclidean norm of every row of an `[n, d]` matrix.
pub fn row_norms<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = m.dims2()?;
    let norms = m
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect();
    Tensor::new(&[n], norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(&mut rng, &[7, 5]);
            let b = random(&mut rng, &[5, 3]);
            let want = naive(&a, &b);
            assert!(a.matmul(&b).unwrap().max_abs_diff(&want).unwrap() < 1e-10);
            let bt = b.transpose().unwrap();
            assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&want).unwrap() < 1e-10);
            let at = a.transpose().unwrap();
            assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&want).unwrap() < 1e-10);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn row_norm_examples() {
        let m = Tensor::<f64>::from_f64(&[3, 2], &[3.0, 4.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let n = row_norms(&m).unwrap();
        assert_eq!(n.data()[0], 5.0);
        assert_eq!(n.data()[1], 0.0);
        assert!((n.data()[2] - 2f64.sqrt()).abs() < 1e-15);
        let ones = Tensor::<f64>::full(&[1, 9], 1.0).unwrap();
        assert_eq!(row_norms(&ones).unwrap().data()[0], 3.0);
    }

    #[test]
    fn shape_invariants_enforced() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        let t = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, f64::NAN, 2.0]).unwrap();
        let err = t.ensure_finite("probe").unwrap_err();
        assert!(err.to_string().contains("flat index 1"));
    }

    proptest::proptest! {
        #[test]
        fn squared_row_norms_equal_row_sums(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(&mut rng, &[rows, cols]);
            let norms = row_norms(&m).unwrap();
            for i in 0..rows {
                let ss: f64 = m.row(i).iter().map(|v| v * v).sum();
                proptest::prop_assert!((norms.data()[i].powi(2) - ss).abs() < 1e-12);
            }
        }
    }
}
