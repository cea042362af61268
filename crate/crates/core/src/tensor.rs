//! Dense `f64` arrays: 2D matrices, `[seq, batch, hidden]` activations and
//! their per-head `[seq, batch, heads, head_dim]` view.
//!
//! All arithmetic uses a fixed left-to-right summation order so that two code
//! paths performing the same products produce bitwise-identical results.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};

/// Row-major owned matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Borrowed row-major matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix view",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_owned(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        transpose(self.view())
    }

    /// Copy of the columns in `range`.
    pub fn col_slice(&self, range: Range<usize>) -> Matrix {
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Copy of the rows in `range`.
    pub fn row_slice(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "matrix add",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn transpose(a: MatRef<'_>) -> Matrix {
    let mut data = vec![0.0; a.rows * a.cols];
    for r in 0..a.rows {
        for c in 0..a.cols {
            data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Matrix {
        rows: a.cols,
        cols: a.rows,
        data,
    }
}

/// Matrix product `a · bm`.
///
/// Every output element is accumulated from `0.0` over the inner index in
/// ascending order, so the result is independent of how rows are grouped.
pub fn matmul(a: MatRef<'_>, bm: MatRef<'_>) -> Result<Matrix> {
    if a.cols != bm.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: vec![a.rows, a.cols],
            right: vec![bm.rows, bm.cols],
        });
    }
    let bt = transpose(bm);
    let inner = a.cols;
    let mut data = Vec::with_capacity(a.rows * bm.cols);
    for i in 0..a.rows {
        let arow = &a.data[i * inner..(i + 1) * inner];
        for j in 0..bm.cols {
            let bcol = &bt.data[j * inner..(j + 1) * inner];
            let mut acc = 0.0;
            for k in 0..inner {
                acc += arow[k] * bcol[k];
            }
            data.push(acc);
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: bm.cols,
        data,
    })
}

/// Attention mask applied to a `queries × keys` score matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Only `(query_block, key_block)` pairs listed in `pattern` are visible.
    Blocked {
        block_size: usize,
        pattern: BTreeSet<(usize, usize)>,
    },
}

impl Mask {
    pub fn blocked(block_size: usize, pattern: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidMask("block size must be positive".into()));
        }
        Ok(Mask::Blocked {
            block_size,
            pattern: pattern.into_iter().collect(),
        })
    }

    /// Every block pair of an `n`-token sequence; equivalent to no mask.
    pub fn blocked_full(n: usize, block_size: usize) -> Result<Self> {
        check_divides("blocked mask sequence length", n, block_size)?;
        let nb = n / block_size;
        Self::blocked(block_size, (0..nb).flat_map(|i| (0..nb).map(move |j| (i, j))))
    }

    /// Causal block-sparse pattern: each query block sees the `window` most
    /// recent key blocks (itself included) plus the first block.
    pub fn local_global(n: usize, block_size: usize, window: usize) -> Result<Self> {
        check_divides("blocked mask sequence length", n, block_size)?;
        let nb = n / block_size;
        let pattern = (0..nb).flat_map(|i| {
            (0..=i).filter(move |&j| j == 0 || i - j < window).map(move |j| (i, j))
        });
        Self::blocked(block_size, pattern)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mask::None => "dense",
            Mask::Causal => "causal",
            Mask::Blocked { .. } => "blocked",
        }
    }

    /// Whether query `i` may attend to key `j` (global token indices).
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Blocked { block_size, pattern } => {
                pattern.contains(&(i / block_size, j / block_size))
            }
        }
    }

    /// True when no visible pair has `key_block > query_block`.
    pub fn is_block_causal(&self) -> bool {
        match self {
            Mask::None => false,
            Mask::Causal => true,
            Mask::Blocked { pattern, .. } => pattern.iter().all(|&(i, j)| j <= i),
        }
    }

    /// Checks the mask against query rows `[row_offset, row_offset + rows)`
    /// and `keys` key columns.
    pub fn validate(&self, row_offset: usize, rows: usize, keys: usize) -> Result<()> {
        if let Mask::Blocked { block_size, pattern } = self {
            check_divides("blocked mask key length", keys, *block_size)?;
            let nkb = keys / block_size;
            if row_offset + rows > keys {
                return Err(Error::InvalidMask(format!(
                    "queries up to {} exceed {keys} keys of a self-attention mask",
                    row_offset + rows
                )));
            }
            if let Some(&(qi, kj)) = pattern.iter().find(|&&(qi, kj)| kj >= nkb || qi >= nkb) {
                return Err(Error::InvalidMask(format!(
                    "block pair ({qi}, {kj}) out of range for {nkb} key blocks"
                )));
            }
        }
        Ok(())
    }
}

/// Masked, max-stabilized softmax over each row of `scores`.
///
/// Row `i` of `scores` is global query `row_offset + i`. Masked entries are
/// excluded before exponentiation and come out as exactly `0.0`.
pub fn row_softmax(scores: MatRef<'_>, mask: &Mask, row_offset: usize) -> Result<Matrix> {
    mask.validate(row_offset, scores.rows, scores.cols)?;
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let q = row_offset + i;
        let row = scores.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, &s) in row.iter().enumerate() {
            if mask.allows(q, j) {
                any = true;
                if s > max {
                    max = s;
                }
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: q });
        }
        let dst = &mut out.data[i * scores.cols..(i + 1) * scores.cols];
        let mut sum = 0.0;
        for (j, &s) in row.iter().enumerate() {
            if mask.allows(q, j) {
                let e = (s - max).exp();
                dst[j] = e;
                sum += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Arrays that the simulated collectives can split and concatenate.
pub trait DenseArray: Sized + Clone + Send {
    fn shape(&self) -> &[usize];
    fn as_slice(&self) -> &[f64];
    fn from_shape_vec(shape: &[usize], data: Vec<f64>) -> Result<Self>;

    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn is_empty(&self) -> bool {
        self.as_slice().is_empty()
    }
}

/// `[seq, batch, hidden]` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

/// `[seq, batch, heads, head_dim]` per-head view of a [`Tensor3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

fn check_data(dims: &[usize], data: &[f64]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidTensor(format!("zero dimension in {dims:?}")));
    }
    let expect: usize = dims.iter().product();
    if data.len() != expect {
        return Err(Error::Shape {
            op: "tensor construction",
            left: dims.to_vec(),
            right: vec![data.len()],
        });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidTensor(format!("non-finite element at flat index {i}")));
    }
    Ok(())
}

pub(crate) fn check_divides(what: &'static str, len: usize, by: usize) -> Result<()> {
    if by == 0 || !len.is_multiple_of(by) {
        return Err(Error::Divisibility { what, len, by });
    }
    Ok(())
}

impl Tensor3 {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let dims = [dims.0, dims.1, dims.2];
        check_data(&dims, &data)?;
        Ok(Self { dims, data })
    }

    pub fn zeros(s: usize, b: usize, d: usize) -> Self {
        Self {
            dims: [s, b, d],
            data: vec![0.0; s * b * d],
        }
    }

    pub fn from_fn(s: usize, b: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(s * b * d);
        for si in 0..s {
            for bi in 0..b {
                for di in 0..d {
                    data.push(f(si, bi, di));
                }
            }
        }
        Self { dims: [s, b, d], data }
    }

    /// Reinterprets a `(seq·batch) × hidden` matrix.
    pub fn from_matrix(s: usize, b: usize, m: Matrix) -> Result<Self> {
        if m.rows != s * b {
            return Err(Error::Shape {
                op: "tensor from matrix",
                left: vec![s, b],
                right: vec![m.rows, m.cols],
            });
        }
        Self::new((s, b, m.cols), m.data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn seq(&self) -> usize {
        self.dims[0]
    }

    pub fn batch(&self) -> usize {
        self.dims[1]
    }

    pub fn hidden(&self) -> usize {
        self.dims[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, s: usize, b: usize, d: usize) -> f64 {
        self.data[(s * self.dims[1] + b) * self.dims[2] + d]
    }

    #[inline]
    pub fn set(&mut self, s: usize, b: usize, d: usize, v: f64) {
        let idx = (s * self.dims[1] + b) * self.dims[2] + d;
        self.data[idx] = v;
    }

    /// `(seq·batch) × hidden` view; every token of every batch entry is a row.
    pub fn as_rows(&self) -> MatRef<'_> {
        MatRef {
            rows: self.dims[0] * self.dims[1],
            cols: self.dims[2],
            data: &self.data,
        }
    }

    /// Right-multiplies every token row by `w`.
    pub fn project(&self, w: &Matrix) -> Result<Tensor3> {
        let m = matmul(self.as_rows(), w.view())?;
        Tensor3::from_matrix(self.dims[0], self.dims[1], m)
    }

    /// `seq × hidden` matrix for batch entry `bi`.
    pub fn batch_matrix(&self, bi: usize) -> Matrix {
        let (s, b, d) = self.dims();
        let mut data = Vec::with_capacity(s * d);
        for si in 0..s {
            let off = (si * b + bi) * d;
            data.extend_from_slice(&self.data[off..off + d]);
        }
        Matrix { rows: s, cols: d, data }
    }

    /// Inverse of [`Tensor3::batch_matrix`] over all batch entries.
    pub fn from_batch_matrices(mats: &[Matrix]) -> Result<Tensor3> {
        let b = mats.len();
        let (s, d) = mats
            .first()
            .map(|m| m.shape())
            .ok_or_else(|| Error::InvalidTensor("no batch matrices".into()))?;
        let mut data = vec![0.0; s * b * d];
        for (bi, m) in mats.iter().enumerate() {
            if m.shape() != (s, d) {
                return Err(Error::Shape {
                    op: "from batch matrices",
                    left: vec![s, d],
                    right: vec![m.rows, m.cols],
                });
            }
            for si in 0..s {
                let off = (si * b + bi) * d;
                data[off..off + d].copy_from_slice(m.row(si));
            }
        }
        Tensor3::new((s, b, d), data)
    }

    /// Tokens `range` along the sequence axis.
    pub fn seq_slice(&self, range: Range<usize>) -> Tensor3 {
        let stride = self.dims[1] * self.dims[2];
        Tensor3 {
            dims: [range.len(), self.dims[1], self.dims[2]],
            data: self.data[range.start * stride..range.end * stride].to_vec(),
        }
    }

    /// Hidden units `range` of every token.
    pub fn hidden_slice(&self, range: Range<usize>) -> Tensor3 {
        let m = self.as_rows().to_owned().col_slice(range);
        Tensor3::from_matrix(self.dims[0], self.dims[1], m).expect("slice keeps token count")
    }

    /// Rank-order concatenation along the sequence axis.
    pub fn concat_seq(parts: &[Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("nothing to concatenate".into()))?;
        let (_, b, d) = first.dims();
        let mut data = Vec::new();
        let mut s = 0;
        for p in parts {
            if p.batch() != b || p.hidden() != d {
                return Err(Error::Shape {
                    op: "concat_seq",
                    left: first.dims.to_vec(),
                    right: p.dims.to_vec(),
                });
            }
            s += p.seq();
            data.extend_from_slice(&p.data);
        }
        Tensor3::new((s, b, d), data)
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor3, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if self.dims != other.dims {
            return Err(Error::Shape {
                op,
                left: self.dims.to_vec(),
                right: other.dims.to_vec(),
            });
        }
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Tensor4 {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let dims = [dims.0, dims.1, dims.2, dims.3];
        check_data(&dims, &data)?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn heads(&self) -> usize {
        self.dims[2]
    }

    pub fn head_dim(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, s: usize, b: usize, h: usize, k: usize) -> f64 {
        self.data[((s * self.dims[1] + b) * self.dims[2] + h) * self.dims[3] + k]
    }

    /// `[seq, batch, head_dim]` slice for local head `h`.
    pub fn head(&self, h: usize) -> Tensor3 {
        let (s, b, hc, hd) = self.dims();
        let mut data = Vec::with_capacity(s * b * hd);
        for row in 0..s * b {
            let off = (row * hc + h) * hd;
            data.extend_from_slice(&self.data[off..off + hd]);
        }
        Tensor3 { dims: [s, b, hd], data }
    }

    /// Stacks per-head `[seq, batch, head_dim]` tensors.
    pub fn from_heads(heads: &[Tensor3]) -> Result<Tensor4> {
        let first = heads
            .first()
            .ok_or_else(|| Error::InvalidTensor("no heads".into()))?;
        let (s, b, hd) = first.dims();
        let hc = heads.len();
        let mut data = vec![0.0; s * b * hc * hd];
        for (h, t) in heads.iter().enumerate() {
            if t.dims != first.dims {
                return Err(Error::Shape {
                    op: "from_heads",
                    left: first.dims.to_vec(),
                    right: t.dims.to_vec(),
                });
            }
            for row in 0..s * b {
                let dst = (row * hc + h) * hd;
                data[dst..dst + hd].copy_from_slice(&t.data[row * hd..(row + 1) * hd]);
            }
        }
        Tensor4::new((s, b, hc, hd), data)
    }
}

/// Views `x` as `hcount` heads of width `hidden / hcount`.
///
/// Element `(s, b, h, k)` of the result is element `(s, b, h·hdim + k)` of `x`;
/// in row-major storage the two layouts coincide, so only the shape changes.
pub fn split_heads(x: &Tensor3, hcount: usize) -> Result<Tensor4> {
    check_divides("split_heads hidden size", x.hidden(), hcount)?;
    let (s, b, d) = x.dims();
    Ok(Tensor4 {
        dims: [s, b, hcount, d / hcount],
        data: x.data.clone(),
    })
}

/// Exact inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor4) -> Tensor3 {
    let (s, b, hc, hd) = x.dims();
    Tensor3 {
        dims: [s, b, hc * hd],
        data: x.data.clone(),
    }
}

impl DenseArray for Tensor3 {
    fn shape(&self) -> &[usize] {
        &self.dims
    }

    fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn from_shape_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match *shape {
            [s, b, d] => Tensor3::new((s, b, d), data),
            _ => Err(Error::InvalidTensor(format!("expected 3 dims, got {shape:?}"))),
        }
    }
}

impl DenseArray for Tensor4 {
    fn shape(&self) -> &[usize] {
        &self.dims
    }

    fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn from_shape_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        match *shape {
            [s, b, h, k] => Tensor4::new((s, b, h, k), data),
            _ => Err(Error::InvalidTensor(format!("expected 4 dims, got {shape:?}"))),
        }
    }
}

/// Splits `data` (of `shape`) into `parts` equal chunks along `axis`.
pub(crate) fn split_axis(shape: &[usize], data: &[f64], axis: usize, parts: usize) -> Vec<Vec<f64>> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let chunk = len / parts;
    (0..parts)
        .map(|c| {
            let mut out = Vec::with_capacity(outer * chunk * inner);
            for o in 0..outer {
                let start = (o * len + c * chunk) * inner;
                out.extend_from_slice(&data[start..start + chunk * inner]);
            }
            out
        })
        .collect()
}

/// Concatenates equally shaped parts (each of `part_shape`) along `axis`.
pub(crate) fn concat_axis(part_shape: &[usize], parts: &[&[f64]], axis: usize) -> Vec<f64> {
    let outer: usize = part_shape[..axis].iter().product();
    let plen = part_shape[axis];
    let inner: usize = part_shape[axis + 1..].iter().product();
    let block = plen * inner;
    let mut out = Vec::with_capacity(outer * block * parts.len());
    for o in 0..outer {
        for p in parts {
            out.extend_from_slice(&p[o * block..(o + 1) * block]);
        }
    }
    out
}
