//! Dense row-major matrices and the masked softmax kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::eye(n, n)
    }

    /// Rectangular identity: ones on the main diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape() != other.shape() {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Copies out a contiguous block of rows.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Copies out a contiguous block of columns.
    pub fn col_block(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums keep the dependency chain short enough to vectorize.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = T::zero();
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if a.rows > 0 && b.cols > 0 && a.cols > 0 {
        // SAFETY: all three buffers are dense row-major with the stated shapes.
        unsafe {
            T::gemm(
                a.rows,
                a.cols,
                b.cols,
                a.data.as_ptr(),
                (a.cols as isize, 1),
                b.data.as_ptr(),
                (b.cols as isize, 1),
                T::zero(),
                out.data.as_mut_ptr(),
                (b.cols as isize, 1),
            );
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_transposed<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transposed {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    if a.rows > 0 && b.rows > 0 && a.cols > 0 {
        // SAFETY: `b` read with swapped strides is its transpose; shapes match.
        unsafe {
            T::gemm(
                a.rows,
                a.cols,
                b.rows,
                a.data.as_ptr(),
                (a.cols as isize, 1),
                b.data.as_ptr(),
                (1, b.cols as isize),
                T::zero(),
                out.data.as_mut_ptr(),
                (b.rows as isize, 1),
            );
        }
    }
    Ok(out)
}

/// Binary visibility over the columns of a logit row (1 = attend, 0 = blocked).
///
/// Blocked entries are skipped outright rather than biased by a large negative
/// constant, so their softmax weight is exactly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveMask {
    visible: Vec<bool>,
}

impl AdditiveMask {
    pub fn new(visible: Vec<bool>) -> Self {
        Self { visible }
    }

    pub fn all_visible(len: usize) -> Self {
        Self {
            visible: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.visible[i]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        self.visible
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }
}

/// Stable softmax of `logits` restricted to `visible`, written into `out`.
/// Blocked positions receive exactly zero. Returns `false` if nothing is visible.
pub(crate) fn softmax_into<T: Scalar>(logits: &[T], visible: &[bool], out: &mut [T]) -> bool {
    let mut max = T::neg_infinity();
    for (&l, &v) in logits.iter().zip(visible) {
        if v && l > max {
            max = l;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for ((o, &l), &v) in out.iter_mut().zip(logits).zip(visible) {
        *o = if v {
            let e = (l - max).exp();
            sum += e;
            e
        } else {
            T::zero()
        };
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Row-wise softmax where each row `r` only sees the entries `masks[r]` marks
/// visible. A single mask is broadcast to every row.
pub fn masked_row_softmax<T: Scalar>(
    logits: &Matrix<T>,
    masks: &[AdditiveMask],
) -> Result<Matrix<T>> {
    if masks.len() != 1 && masks.len() != logits.rows {
        return Err(Error::shape(format!(
            "{} masks for {} rows",
            masks.len(),
            logits.rows
        )));
    }
    if masks.iter().any(|m| m.len() != logits.cols) {
        return Err(Error::shape("mask length differs from logit row length"));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let mask = if masks.len() == 1 { &masks[0] } else { &masks[r] };
        let cols = logits.cols;
        if !softmax_into(
            logits.row(r),
            mask.visible(),
            &mut out.data[r * cols..(r + 1) * cols],
        ) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    Ok(out)
}

/// Plain row-wise softmax.
pub fn row_softmax<T: Scalar>(logits: &Matrix<T>) -> Result<Matrix<T>> {
    masked_row_softmax(logits, &[AdditiveMask::all_visible(logits.cols)])
}

pub fn unit_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Scales every row to unit L2 norm.
pub fn unit_normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let n = norm(m.row(r));
        if n == T::zero() || !n.is_finite() {
            return Err(Error::DegenerateVector);
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::shape(format!("cosine of {} vs {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(u, v) / (nu * nv)).max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let mut rng = SplitMix64::new(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn permutation_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(matmul(&a, &p).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..50 {
            let a = random(5, 7, &mut rng);
            let b = random(7, 3, &mut rng);
            let got = matmul(&a, &b).unwrap();
            assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
            let bt = b.transpose();
            assert!(matmul_transposed(&a, &bt).unwrap().max_abs_diff(&got) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn uniform_softmax_on_equal_logits() {
        let l = Matrix::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = row_softmax(&l).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn blocked_entry_is_exact_zero() {
        let l = Matrix::<f64>::from_rows(&[vec![5.0, -2.0, 9.0]]).unwrap();
        let s = masked_row_softmax(&l, &[AdditiveMask::new(vec![true, false, true])]).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 0) + s.get(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let l = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = row_softmax(&l).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (c, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.get(0, c) - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_blocked_row_is_an_error() {
        let l = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let masks = [
            AdditiveMask::all_visible(2),
            AdditiveMask::new(vec![false, false]),
        ];
        assert!(matches!(
            masked_row_softmax(&l, &masks),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::<f64>::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = unit_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(matches!(
            unit_normalize_rows(&Matrix::<f64>::zeros(1, 2)),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cosine_cases() {
        let mut rng = SplitMix64::new(3);
        let u: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let v: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((cosine(&u, &v).unwrap() - d / (nu * nv)).abs() < 1e-12);
        assert!(cosine(&u, &v[..3]).is_err());
        assert!(cosine(&u, &[0.0; 9]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let l = Matrix::<f32>::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let s = row_softmax(&l).unwrap();
        assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn shift_invariance((row, _) in logits_and_mask(), shift in -50.0f64..50.0) {
            let a = Matrix::new(1, row.len(), row.clone()).unwrap();
            let b = a.map(|v| v + shift);
            prop_assert!(row_softmax(&a).unwrap().max_abs_diff(&row_softmax(&b).unwrap()) < 1e-9);
        }

        #[test]
        fn blocked_values_do_not_matter((row, mut vis) in logits_and_mask(), big in prop::bool::ANY) {
            vis[0] = true;
            let mask = [AdditiveMask::new(vis.clone())];
            let a = Matrix::new(1, row.len(), row.clone()).unwrap();
            let fill = if big { 1000.0 } else { -1000.0 };
            let b = Matrix::new(1, row.len(), row.iter().zip(&vis).map(|(&v, &s)| if s { v } else { fill }).collect()).unwrap();
            let sa = masked_row_softmax(&a, &mask).unwrap();
            let sb = masked_row_softmax(&b, &mask).unwrap();
            prop_assert_eq!(sa.data(), sb.data());
            prop_assert!((sa.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (w, v) in sa.data().iter().zip(&vis) {
                if !v { prop_assert_eq!(*w, 0.0); }
            }
        }

        #[test]
        fn all_visible_equals_unmasked((row, _) in logits_and_mask()) {
            let a = Matrix::new(1, row.len(), row.clone()).unwrap();
            let masked = masked_row_softmax(&a, &[AdditiveMask::all_visible(row.len())]).unwrap();
            prop_assert_eq!(masked, row_softmax(&a).unwrap());
        }

        #[test]
        fn normalized_rows_have_unit_norm(rows in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 4), 1..6)) {
            let m = Matrix::from_rows(&rows).unwrap();
            let n = unit_normalize_rows(&m).unwrap();
            for r in n.row_iter() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-9);
            }
        }
    }
}
