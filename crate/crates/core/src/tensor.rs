//! Dense `(batch, heads, seq, dim)` storage.

use std::fmt;

use crate::element::Element;
use crate::error::{IsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub dim: usize,
}

impl Dims {
    pub const fn new(batch: usize, heads: usize, seq: usize, dim: usize) -> Self {
        Dims { batch, heads, seq, dim }
    }

    pub fn len(&self) -> usize {
        self.batch * self.heads * self.seq * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(batch, head)` slices.
    pub fn num_heads_total(&self) -> usize {
        self.batch * self.heads
    }

    pub fn head_len(&self) -> usize {
        self.seq * self.dim
    }

    pub fn with_seq(self, seq: usize) -> Self {
        Dims { seq, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.heads, self.seq, self.dim]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.heads, self.seq, self.dim)
    }
}

/// Row-major 4-axis tensor.
///
/// Batch, head and feature dims are at least 1. The sequence axis may be 0,
/// which is what an empty block gather produces.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.len() {
            return Err(IsaError::layout(format!(
                "tensor of dims {dims} needs {} elements, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(IsaError::Input(format!("non-finite element at flat index {pos}")));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        Ok(Tensor4 { dims, data: vec![T::default(); dims.len()] })
    }

    /// Builds a tensor from `f(batch, head, seq, dim)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.batch {
            for h in 0..dims.heads {
                for s in 0..dims.seq {
                    for d in 0..dims.dim {
                        data.push(f(b, h, s, d));
                    }
                }
            }
        }
        Tensor4::new(dims, data)
    }

    /// Assembles a tensor from per-head row blocks (in `(batch, head)` order).
    pub(crate) fn from_heads(dims: Dims, heads: Vec<Vec<T>>) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for h in heads {
            if h.len() != dims.head_len() {
                return Err(IsaError::layout(format!(
                    "head slice has {} elements, expected {}",
                    h.len(),
                    dims.head_len()
                )));
            }
            data.extend(h);
        }
        Tensor4::new(dims, data)
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn head_offset(&self, b: usize, h: usize) -> usize {
        (b * self.dims.heads + h) * self.dims.head_len()
    }

    /// Rows of one `(batch, head)` slice.
    pub fn head(&self, b: usize, h: usize) -> MatRef<'_, T> {
        let off = self.head_offset(b, h);
        MatRef::new(&self.data[off..off + self.dims.head_len()], self.dims.seq, self.dims.dim)
    }

    /// Slice by flat head index `b * heads + h`.
    pub fn head_flat(&self, bh: usize) -> MatRef<'_, T> {
        let len = self.dims.head_len();
        MatRef::new(&self.data[bh * len..(bh + 1) * len], self.dims.seq, self.dims.dim)
    }

    pub fn heads(&self) -> impl Iterator<Item = MatRef<'_, T>> + '_ {
        (0..self.dims.num_heads_total()).map(move |bh| self.head_flat(bh))
    }

    pub fn row(&self, b: usize, h: usize, s: usize) -> &[T] {
        let off = self.head_offset(b, h) + s * self.dims.dim;
        &self.data[off..off + self.dims.dim]
    }

    pub fn get(&self, b: usize, h: usize, s: usize, d: usize) -> T {
        self.data[self.head_offset(b, h) + s * self.dims.dim + d]
    }

    /// Sets one element. Non-finite values are rejected.
    pub fn set(&mut self, b: usize, h: usize, s: usize, d: usize, value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(IsaError::Input("refusing to store a non-finite value".into()));
        }
        let off = self.head_offset(b, h) + s * self.dims.dim + d;
        self.data[off] = value;
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Result<Self> {
        Tensor4::new(self.dims, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Converts to another storage type through `f64`.
    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.to_f64().abs()))
    }
}

impl<T: Element> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4<{:?}>{}", T::PRECISION, self.dims)
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.batch == 0 || dims.heads == 0 || dims.dim == 0 {
        return Err(IsaError::layout(format!("batch, heads and dim must be >= 1, got {dims}")));
    }
    Ok(())
}

/// Borrowed `rows x cols` row-major matrix.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
}

impl<'a, T: Element> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        MatRef { data, rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &'a [T] {
        self.data
    }
}
