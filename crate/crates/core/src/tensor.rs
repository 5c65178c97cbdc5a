//! Dense row-major matrices and 4-D arrays, matrix products, and the
//! gather/scatter primitives that turn a batchwise dropout mask into
//! compact submatrix arithmetic.
//!
//! Every product here has two summation modes. [`Summation::Deterministic`]
//! accumulates each output element strictly left to right over the inner
//! dimension, so results are bit-identical to a naive triple loop.
//! [`Summation::Blocked`] hands the product to a packed GEMM kernel that is
//! free to reorder the sums.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type of all arrays (`f32` or `f64`).
pub trait Element:
    Copy
    + Send
    + Sync
    + 'static
    + Default
    + fmt::Debug
    + fmt::Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Width in bytes of the serialized little-endian form.
    const BYTES: usize;
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = A × B` through the packed kernel. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_blocked(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $bytes:expr, $precision:expr, $gemm:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const BYTES: usize = $bytes;
            const PRECISION: Precision = $precision;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
            fn gemm_blocked(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.fill(0.0);
                    return;
                }
                // Stride and extent checks are done by the callers in this module.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, 4, Precision::F32, matrixmultiply::sgemm);
impl_element!(f64, 8, Precision::F64, matrixmultiply::dgemm);

/// Run-time element type selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Summation order policy for matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summation {
    /// Fixed left-to-right accumulation over the inner dimension.
    #[default]
    Deterministic,
    /// Packed, cache-blocked kernel; summation order unspecified.
    Blocked,
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.data[r * self.cols..r * self.cols + self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::ZERO; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from nested rows; panics on ragged input. Intended for tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&mut self, factor: T) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
        Ok(())
    }

    /// Adds `bias[j]` to every entry of column `j`.
    pub fn add_row_vector(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias of length {} for {} columns", bias.len(), self.cols),
            ));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)).take(self.rows) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::ZERO; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    /// Copy with a different element type.
    pub fn cast<U: Element>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn row_slice(&self, start: usize, count: usize) -> Matrix<T> {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }
}

/// Strictly increasing list of kept indices into a parent axis of size `parent`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSet {
    indices: Vec<usize>,
    parent: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, parent: usize) -> Result<Self> {
        for (pos, &i) in indices.iter().enumerate() {
            if i >= parent {
                return Err(Error::IndexOutOfRange { index: i, parent });
            }
            if pos > 0 && indices[pos - 1] >= i {
                return Err(Error::UnsortedIndices { position: pos });
            }
        }
        Ok(IndexSet { indices, parent })
    }

    pub fn all(parent: usize) -> Self {
        IndexSet { indices: (0..parent).collect(), parent }
    }

    pub fn empty(parent: usize) -> Self {
        IndexSet { indices: Vec::new(), parent }
    }

    /// Positions of the `true` entries.
    pub fn from_keep(keep: &[bool]) -> Self {
        IndexSet {
            indices: keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect(),
            parent: keep.len(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn parent(&self) -> usize {
        self.parent
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.parent
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Replaces every index `i` by the run `i*block .. (i+1)*block`.
    ///
    /// Used where one kept channel owns a contiguous block of columns
    /// (flattened spatial positions, or the `f×f` taps of a filter).
    pub fn expand(&self, block: usize) -> IndexSet {
        let mut indices = Vec::with_capacity(self.len() * block);
        for i in self.iter() {
            indices.extend(i * block..(i + 1) * block);
        }
        IndexSet { indices, parent: self.parent * block }
    }
}

// ── Products ───────────────────────────────────────────────────────

const COL_BLOCK: usize = 256;

/// `C += A × B` where `A(i, t) = a[i*rsa + t*csa]` and `B` is contiguous
/// `inner × n`. For every output element the products are added in
/// increasing `t`, which is the order of a naive triple loop.
fn gemm_ordered<T: Element>(
    rows: usize,
    inner: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), rows * n);
    debug_assert!(b.len() >= inner * n);
    if n == 0 || rows == 0 {
        return;
    }
    let at = |i: usize, t: usize| a[i * rsa + t * csa];
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= rows {
            let block = &mut c[i * n..(i + 4) * n];
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
            for t in 0..inner {
                let (a0, a1, a2, a3) = (at(i, t), at(i + 1, t), at(i + 2, t), at(i + 3, t));
                let bt = &b[t * n + j0..t * n + j1];
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(bt)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        while i < rows {
            let ci = &mut c[i * n + j0..i * n + j1];
            for t in 0..inner {
                let av = at(i, t);
                let bt = &b[t * n + j0..t * n + j1];
                for (x, &bv) in ci.iter_mut().zip(bt) {
                    *x += av * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// `A × B`.
pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_with(a, b, Summation::Deterministic)
}

pub fn matmul_with<T: Element>(a: &Matrix<T>, b: &Matrix<T>, mode: Summation) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(m, n);
    match mode {
        Summation::Deterministic => gemm_ordered(m, k, n, &a.data, k, 1, &b.data, &mut c.data),
        Summation::Blocked => T::gemm_blocked(m, k, n, &a.data, k, 1, &b.data, n, 1, &mut c.data),
    }
    c.check_finite("matmul")?;
    Ok(c)
}

/// `Aᵀ × B` for `A: m×b`, `B: m×n`, giving `b×n`, without forming `Aᵀ`.
pub fn matmul_at<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_at_with(a, b, Summation::Deterministic)
}

pub fn matmul_at_with<T: Element>(a: &Matrix<T>, b: &Matrix<T>, mode: Summation) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_at", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut c = Matrix::zeros(m, n);
    match mode {
        Summation::Deterministic => gemm_ordered(m, k, n, &a.data, 1, a.cols, &b.data, &mut c.data),
        Summation::Blocked => T::gemm_blocked(m, k, n, &a.data, 1, a.cols, &b.data, n, 1, &mut c.data),
    }
    c.check_finite("matmul_at")?;
    Ok(c)
}

/// `A × Bᵀ` for `A: b×n`, `B: m×n`, giving `b×m`.
///
/// The deterministic kernel packs `B` column-wise into scratch space so the
/// inner loop stays contiguous; the summation order is unaffected.
pub fn matmul_bt<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_bt_with(a, b, Summation::Deterministic)
}

pub fn matmul_bt_with<T: Element>(a: &Matrix<T>, b: &Matrix<T>, mode: Summation) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_bt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut c = Matrix::zeros(m, n);
    match mode {
        Summation::Deterministic => {
            let mut packed = vec![T::ZERO; k * n];
            for j in 0..n {
                for (t, &v) in b.row(j).iter().enumerate() {
                    packed[t * n + j] = v;
                }
            }
            gemm_ordered(m, k, n, &a.data, k, 1, &packed, &mut c.data)
        }
        Summation::Blocked => T::gemm_blocked(m, k, n, &a.data, k, 1, &b.data, 1, b.cols, &mut c.data),
    }
    c.check_finite("matmul_bt")?;
    Ok(c)
}

// ── Gather / scatter ───────────────────────────────────────────────

fn check_parent(op: &'static str, set: &IndexSet, size: usize) -> Result<()> {
    if set.parent() != size {
        return Err(Error::shape(op, format!("index set over {} for an axis of {}", set.parent(), size)));
    }
    Ok(())
}

/// `X[:, keep]`.
pub fn gather_cols<T: Element>(x: &Matrix<T>, keep: &IndexSet) -> Result<Matrix<T>> {
    check_parent("gather_cols", keep, x.cols)?;
    let mut data = Vec::with_capacity(x.rows * keep.len());
    for i in 0..x.rows {
        let row = x.row(i);
        data.extend(keep.iter().map(|j| row[j]));
    }
    Ok(Matrix { rows: x.rows, cols: keep.len(), data })
}

/// `W[rows, cols]`.
pub fn gather_submatrix<T: Element>(w: &Matrix<T>, rows: &IndexSet, cols: &IndexSet) -> Result<Matrix<T>> {
    check_parent("gather_submatrix rows", rows, w.rows)?;
    check_parent("gather_submatrix cols", cols, w.cols)?;
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for i in rows.iter() {
        let row = w.row(i);
        data.extend(cols.iter().map(|j| row[j]));
    }
    Ok(Matrix { rows: rows.len(), cols: cols.len(), data })
}

/// `W[rows, cols] += delta`; every other entry of `W` is left untouched.
pub fn scatter_add_submatrix<T: Element>(
    w: &mut Matrix<T>,
    rows: &IndexSet,
    cols: &IndexSet,
    delta: &Matrix<T>,
) -> Result<()> {
    check_parent("scatter_add_submatrix rows", rows, w.rows)?;
    check_parent("scatter_add_submatrix cols", cols, w.cols)?;
    if delta.shape() != (rows.len(), cols.len()) {
        return Err(Error::shape(
            "scatter_add_submatrix",
            format!("delta {:?} for a {}x{} selection", delta.shape(), rows.len(), cols.len()),
        ));
    }
    let wc = w.cols;
    for (r, i) in rows.iter().enumerate() {
        let dst = &mut w.data[i * wc..(i + 1) * wc];
        for (&d, j) in delta.row(r).iter().zip(cols.iter()) {
            dst[j] += d;
        }
    }
    Ok(())
}

/// `v[keep]`.
pub fn gather_vec<T: Copy>(v: &[T], keep: &IndexSet) -> Result<Vec<T>> {
    if keep.parent() != v.len() {
        return Err(Error::shape("gather_vec", format!("index set over {} for length {}", keep.parent(), v.len())));
    }
    Ok(keep.iter().map(|i| v[i]).collect())
}

// ── 4-D arrays ─────────────────────────────────────────────────────

/// `batch × channels × side × side` array, contiguous in that order.
///
/// Filter banks use the same type with `batch` = output filters and
/// `channels` = input channels.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    batch: usize,
    channels: usize,
    side: usize,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4 {}x{}x{}x{}", self.batch, self.channels, self.side, self.side)
    }
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(batch: usize, channels: usize, side: usize) -> Self {
        Tensor4 { batch, channels, side, data: vec![T::ZERO; batch * channels * side * side] }
    }

    pub fn from_vec(batch: usize, channels: usize, side: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * channels * side * side {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("{} values for {batch}x{channels}x{side}x{side}", data.len()),
            ));
        }
        Ok(Tensor4 { batch, channels, side, data })
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        side: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * channels * side * side);
        for n in 0..batch {
            for c in 0..channels {
                for y in 0..side {
                    for x in 0..side {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { batch, channels, side, data }
    }

    /// Reinterprets a `batch × (channels·side²)` matrix; no copy.
    pub fn from_matrix(m: Matrix<T>, channels: usize, side: usize) -> Result<Self> {
        if m.cols != channels * side * side {
            return Err(Error::shape(
                "Tensor4::from_matrix",
                format!("{} columns for {channels}x{side}x{side}", m.cols),
            ));
        }
        Ok(Tensor4 { batch: m.rows, channels, side, data: m.data })
    }

    /// Flattens to `batch × (channels·side²)`, channel-major; no copy.
    pub fn into_matrix(self) -> Matrix<T> {
        let cols = self.channels * self.side * self.side;
        Matrix { rows: self.batch, cols, data: self.data }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.side * self.side
    }
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.channels + c) * self.side + y) * self.side + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `channels·side²` block of one batch entry.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.channels * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.channels * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }
}

/// `W[out_keep, in_keep, :, :]` for a filter bank `W: m×c×f×f`.
pub fn gather_filters<T: Element>(w: &Tensor4<T>, out_keep: &IndexSet, in_keep: &IndexSet) -> Result<Tensor4<T>> {
    check_parent("gather_filters out", out_keep, w.batch)?;
    check_parent("gather_filters in", in_keep, w.channels)?;
    let plane = w.plane();
    let mut data = Vec::with_capacity(out_keep.len() * in_keep.len() * plane);
    for o in out_keep.iter() {
        for c in in_keep.iter() {
            let start = w.offset(o, c, 0, 0);
            data.extend_from_slice(&w.data[start..start + plane]);
        }
    }
    Ok(Tensor4 { batch: out_keep.len(), channels: in_keep.len(), side: w.side, data })
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    pub fn naive_matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(a.cols(), b.rows());
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut acc = T::ZERO;
            for t in 0..a.cols() {
                acc += a.get(i, t) * b.get(t, j);
            }
            acc
        })
    }
}
