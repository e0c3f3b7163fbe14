//! Dense row-major tensors and the handful of primitives the attention
//! kernels are built from.
//!
//! `f64` is the reference scalar. `f32` is available through the same generic
//! code for benchmarking. Every reduction runs in a fixed loop order, so two
//! calls on identical inputs produce bitwise-identical results.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;

use crate::error::{dim_err, Error, Result};

/// Floating-point element type usable by the kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Fill value for masked attention logits: the most negative finite scalar.
#[inline]
pub fn mask_fill_value<T: Scalar>() -> T {
    T::min_value()
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 64 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} elements]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the buffer matches the shape and holds
    /// only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent of a matrix (product of all but the first dimension).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `start..end` of a matrix as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Columns `start..end` of a 2-D matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows() * w);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Self {
            shape: vec![self.rows(), w],
            data,
        }
    }

    /// Concatenates matrices with the same column count along rows.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != cols) {
            return dim_err("concat_rows: column counts differ");
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
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

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

/// Boolean mask with the same row-major layout as [`Tensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return dim_err(format!("mask shape {:?} vs {} values", shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// `n × n` mask, true on and below the diagonal.
    pub fn causal(n: usize) -> Self {
        let data = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Self {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Matrix product with a fixed `i, p, j` loop order.
///
/// Each output element is accumulated over `p` in increasing order starting
/// from zero, exactly as a textbook triple loop would.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return dim_err("matmul expects 2-D operands");
    }
    let (m, p) = (a.shape[0], a.shape[1]);
    let (p2, n) = (b.shape[0], b.shape[1]);
    if p != p2 {
        return dim_err(format!("matmul inner dims {p} vs {p2}"));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a.data[i * p..(i + 1) * p].iter().enumerate() {
            axpy(out_row, aik, &b.data[kk * n..(kk + 1) * n]);
        }
    }
    Tensor::from_parts(vec![m, n], out).check_finite("matmul")
}

/// Row-wise softmax of `scale * a`, max-subtracted.
pub fn row_softmax<T: Scalar>(a: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if a.shape.len() != 2 {
        return dim_err("row_softmax expects a matrix");
    }
    let cols = a.cols();
    let mut data = a.data.clone();
    for row in data.chunks_mut(cols) {
        softmax_in_place(row, scale);
    }
    Tensor::from_parts(a.shape.clone(), data).check_finite("row_softmax")
}

/// Keeps `a` where `mask` is true and writes `fill` elsewhere.
pub fn masked_fill<T: Scalar>(a: &Tensor<T>, mask: &Mask, fill: T) -> Result<Tensor<T>> {
    if a.shape != mask.shape {
        return dim_err(format!(
            "masked_fill {:?} vs mask {:?}",
            a.shape, mask.shape
        ));
    }
    let data = a
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&x, &keep)| if keep { x } else { fill })
        .collect();
    Tensor::from_parts(a.shape.clone(), data).check_finite("masked_fill")
}

/// In-place softmax of `scale * row`. Logits that overflow are clamped to the
/// mask fill value so fully masked rows degrade to uniform instead of NaN.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let floor = mask_fill_value::<T>();
    let mut max = floor;
    for x in row.iter_mut() {
        let z = *x * scale;
        *x = if z.is_finite() { z } else { floor };
        if *x > max {
            max = *x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y = x · M` for a row vector `x` (length r) and row-major `M` (r × c).
#[inline]
pub(crate) fn vec_mat<T: Scalar>(x: &[T], m: &[T], cols: usize, y: &mut [T]) {
    y.iter_mut().for_each(|v| *v = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        axpy(y, xi, &m[i * cols..(i + 1) * cols]);
    }
}

/// `M += a ⊗ b` (outer product, row-major, `a` indexes rows).
#[inline]
pub(crate) fn add_outer<T: Scalar>(m: &mut [T], a: &[T], b: &[T]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        axpy(&mut m[i * cols..(i + 1) * cols], ai, b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, p, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::<f64>::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..p {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let r = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_bitwise_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::random(&[5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::random(&[7, 3], -1.0, 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = triple_loop(&a, &b);
        assert!(fast
            .data()
            .iter()
            .zip(slow.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&t(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = row_softmax(&t(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);

        let s = row_softmax(&t(&[&[1.0, 2.0, 3.0]]), 1.0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, &x) in s.data().iter().enumerate() {
            assert!((x - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_fully_masked_row_is_uniform() {
        let a = Tensor::<f64>::zeros(&[1, 4]);
        let m = masked_fill(&a, &Mask::filled(&[1, 4], false), mask_fill_value()).unwrap();
        let s = row_softmax(&m, 3.0).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn masked_fill_examples() {
        let a = Tensor::<f64>::random(&[3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(
            masked_fill(&a, &Mask::filled(&[3, 3], true), 0.0).unwrap(),
            a
        );
        let fill = mask_fill_value::<f64>();
        let c = masked_fill(&a, &Mask::filled(&[3, 3], false), fill).unwrap();
        assert!(c.data().iter().all(|&x| x == fill));
        let ones = Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap();
        let tri = masked_fill(&ones, &Mask::causal(3), 0.0).unwrap();
        assert_eq!(tri.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(masked_fill(&ones, &Mask::causal(2), 0.0).is_err());
    }

    #[test]
    fn new_rejects_bad_buffers() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1, 2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::<f64>::random(&[8, 8], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::random(&[8, 8], -1.0, 1.0, &mut rng);
            let c = Tensor::<f64>::random(&[8, 8], -1.0, 1.0, &mut rng);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let bound = 1e-9 * a.max_abs() * b.max_abs() * c.max_abs();
            assert!(l.max_abs_diff(&r).unwrap() <= bound);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..40), scale in 0.01f64..4.0) {
            let n = row.len();
            let s = row_softmax(&Tensor::new(vec![1, n], row).unwrap(), scale).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn matmul_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::random(&[6, 5], -2.0, 2.0, &mut rng);
            let b = Tensor::<f64>::random(&[5, 4], -2.0, 2.0, &mut rng);
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        }
    }
}
