//! Block pooling and block-granular gather/scatter/concat.
//!
//! Index lists are given per `(batch, head)` slice, in flat order
//! `b * heads + h`, and must be strictly ascending.

use crate::element::Element;
use crate::error::{IsaError, Result};
use crate::layout::BlockLayout;
use crate::tensor::{Dims, MatRef, Tensor4};

/// Means of the valid rows of each block of one head, as `f64` rows.
///
/// `x` may be given in unpadded (`seq_len` rows) or padded (`padded_len`
/// rows) coordinates; padded rows are never read.
///
/// The mean is taken as `first + mean(row - first)`, which is exact for a
/// block of identical rows.
pub(crate) fn block_means_head<T: Element>(x: MatRef<'_, T>, layout: &BlockLayout) -> Vec<f64> {
    let d = x.cols();
    let padded = x.rows() != layout.seq_len() && x.rows() == layout.padded_len();
    let mut out = vec![0.0f64; layout.num_blocks() * d];
    for u in 0..layout.num_blocks() {
        let range = if padded { layout.padded_range(u) } else { layout.range(u) };
        let n = range.len() as f64;
        let first = x.row(range.start);
        let acc = &mut out[u * d..(u + 1) * d];
        for r in range.clone().skip(1) {
            for ((a, v), f) in acc.iter_mut().zip(x.row(r)).zip(first) {
                *a += v.to_f64() - f.to_f64();
            }
        }
        for (a, f) in acc.iter_mut().zip(first) {
            *a = f.to_f64() + *a / n;
        }
    }
    out
}

/// Compresses the sequence axis to one mean row per block.
///
/// Output dims are `(B, H, T, D)` with `T = layout.num_blocks()`. Row `u` is the
/// arithmetic mean of the valid rows of block `u`; padding never contributes.
pub fn block_mean<T: Element>(x: &Tensor4<T>, layout: &BlockLayout) -> Result<Tensor4<T>> {
    let dims = x.dims();
    if dims.seq != layout.seq_len() && dims.seq != layout.padded_len() {
        return Err(IsaError::layout(format!(
            "tensor sequence length {} matches neither the layout length {} nor its padded length {}",
            dims.seq,
            layout.seq_len(),
            layout.padded_len()
        )));
    }
    let heads = x
        .heads()
        .map(|h| block_means_head(h, layout).into_iter().map(T::from_f64).collect())
        .collect();
    Tensor4::from_heads(dims.with_seq(layout.num_blocks()), heads)
}

/// Zero-fills each block up to `block_size` rows, giving `padded_len` rows.
pub fn pad<T: Element>(x: &Tensor4<T>, layout: &BlockLayout) -> Result<Tensor4<T>> {
    let dims = x.dims();
    layout.check_seq(dims.seq, "padded tensor")?;
    let d = dims.dim;
    let heads = x
        .heads()
        .map(|head| {
            let mut out = vec![T::default(); layout.padded_len() * d];
            for u in 0..layout.num_blocks() {
                let src = layout.range(u);
                let dst = layout.padded_range(u);
                out[dst.start * d..dst.end * d].copy_from_slice(&head.as_slice()[src.start * d..src.end * d]);
            }
            out
        })
        .collect();
    Tensor4::from_heads(dims.with_seq(layout.padded_len()), heads)
}

/// Drops the padding rows introduced by [`pad`].
pub fn unpad<T: Element>(x: &Tensor4<T>, layout: &BlockLayout) -> Result<Tensor4<T>> {
    let dims = x.dims();
    if dims.seq != layout.padded_len() {
        return Err(IsaError::layout(format!(
            "expected padded length {}, got {}",
            layout.padded_len(),
            dims.seq
        )));
    }
    let d = dims.dim;
    let heads = x
        .heads()
        .map(|head| {
            let mut out = Vec::with_capacity(layout.seq_len() * d);
            for u in 0..layout.num_blocks() {
                let r = layout.padded_range(u);
                out.extend_from_slice(&head.as_slice()[r.start * d..r.end * d]);
            }
            out
        })
        .collect();
    Tensor4::from_heads(dims.with_seq(layout.seq_len()), heads)
}

/// Validates a block index list: in range, strictly ascending.
pub fn check_index_list(list: &[usize], limit: usize) -> Result<()> {
    if let Some(&bad) = list.iter().find(|&&u| u >= limit) {
        return Err(IsaError::Index { index: bad, limit });
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IsaError::contract(format!(
            "block index list {list:?} must be sorted ascending without duplicates"
        )));
    }
    Ok(())
}

fn check_lists(lists: &[Vec<usize>], dims: Dims, limit: usize) -> Result<()> {
    if lists.len() != dims.num_heads_total() {
        return Err(IsaError::layout(format!(
            "expected {} per-head index lists, got {}",
            dims.num_heads_total(),
            lists.len()
        )));
    }
    for l in lists {
        check_index_list(l, limit)?;
    }
    Ok(())
}

/// Copies the rows of `blocks` (in list order) out of one head.
pub(crate) fn gather_rows<T: Element>(x: MatRef<'_, T>, layout: &BlockLayout, blocks: &[usize]) -> Vec<T> {
    let d = x.cols();
    let mut out = Vec::with_capacity(layout.rows_in(blocks) * d);
    for &u in blocks {
        let r = layout.range(u);
        out.extend_from_slice(&x.as_slice()[r.start * d..r.end * d]);
    }
    out
}

/// Gathers whole blocks along the sequence axis.
///
/// The output holds the valid rows of the listed blocks in list order, i.e.
/// `|idx| * b` rows when all listed blocks are full. Every head must gather
/// the same number of rows.
pub fn gather_blocks<T: Element>(x: &Tensor4<T>, layout: &BlockLayout, idx: &[Vec<usize>]) -> Result<Tensor4<T>> {
    let dims = x.dims();
    layout.check_seq(dims.seq, "gather source")?;
    check_lists(idx, dims, layout.num_blocks())?;
    let out_len = idx.first().map(|l| layout.rows_in(l)).unwrap_or(0);
    if idx.iter().any(|l| layout.rows_in(l) != out_len) {
        return Err(IsaError::layout("per-head gathers produce different sequence lengths"));
    }
    let heads = x.heads().zip(idx).map(|(h, l)| gather_rows(h, layout, l)).collect();
    Tensor4::from_heads(dims.with_seq(out_len), heads)
}

/// Writes the rows of `src` into the listed blocks of one head.
pub(crate) fn scatter_rows<T: Element>(dst: &mut [T], d: usize, layout: &BlockLayout, blocks: &[usize], src: &[T]) {
    let mut pos = 0;
    for &u in blocks {
        let r = layout.range(u);
        let n = r.len() * d;
        dst[r.start * d..r.end * d].copy_from_slice(&src[pos..pos + n]);
        pos += n;
    }
    debug_assert_eq!(pos, src.len());
}

/// Returns `dst` with the listed blocks replaced by consecutive rows of `src`.
pub fn scatter_blocks<T: Element>(
    dst: &Tensor4<T>,
    layout: &BlockLayout,
    idx: &[Vec<usize>],
    src: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut writer = BlockWriter::from_tensor(dst.clone(), layout.clone())?;
    writer.scatter(idx, src)?;
    Ok(writer.into_tensor())
}

/// Assembles an output tensor from several disjoint block scatters.
///
/// Tracks a write count per `(head, block)`; writing a block twice is a
/// contract violation.
#[derive(Debug)]
pub struct BlockWriter<T> {
    dims: Dims,
    data: Vec<T>,
    layout: BlockLayout,
    writes: Vec<Vec<u32>>,
}

impl<T: Element> BlockWriter<T> {
    pub fn new(dims: Dims, layout: BlockLayout) -> Result<Self> {
        Self::from_tensor(Tensor4::zeros(dims)?, layout)
    }

    pub fn from_tensor(out: Tensor4<T>, layout: BlockLayout) -> Result<Self> {
        let dims = out.dims();
        layout.check_seq(dims.seq, "scatter destination")?;
        let writes = vec![vec![0; layout.num_blocks()]; dims.num_heads_total()];
        Ok(BlockWriter { dims, data: out.into_vec(), layout, writes })
    }

    pub fn scatter(&mut self, idx: &[Vec<usize>], src: &Tensor4<T>) -> Result<()> {
        let dims = self.dims;
        let sdims = src.dims();
        check_lists(idx, dims, self.layout.num_blocks())?;
        if (sdims.batch, sdims.heads, sdims.dim) != (dims.batch, dims.heads, dims.dim) {
            return Err(IsaError::layout(format!("scatter source {sdims} does not fit destination {dims}")));
        }
        for (bh, list) in idx.iter().enumerate() {
            let need = self.layout.rows_in(list);
            if need != sdims.seq {
                return Err(IsaError::layout(format!(
                    "scatter of {} blocks needs {need} source rows, got {}",
                    list.len(),
                    sdims.seq
                )));
            }
            if let Some(&u) = list.iter().find(|&&u| self.writes[bh][u] > 0) {
                return Err(IsaError::contract(format!("block {u} of head slice {bh} written twice")));
            }
        }
        let d = dims.dim;
        let head_len = dims.head_len();
        for (bh, list) in idx.iter().enumerate() {
            let head = &mut self.data[bh * head_len..(bh + 1) * head_len];
            scatter_rows(head, d, &self.layout, list, src.head_flat(bh).as_slice());
            for &u in list {
                self.writes[bh][u] += 1;
            }
        }
        Ok(())
    }

    /// Per-head write counts of every block.
    pub fn write_counts(&self) -> &[Vec<u32>] {
        &self.writes
    }

    pub fn is_complete(&self) -> bool {
        self.writes.iter().all(|w| w.iter().all(|&c| c == 1))
    }

    /// Finishes, requiring every block to have been written exactly once.
    pub fn finish(self) -> Result<Tensor4<T>> {
        if !self.is_complete() {
            return Err(IsaError::contract("reconstruction left some blocks unwritten"));
        }
        Ok(self.into_tensor())
    }

    pub fn into_tensor(self) -> Tensor4<T> {
        Tensor4::from_parts_unchecked(self.dims, self.data)
    }
}

/// Concatenates along the sequence axis: `a`'s rows precede `b`'s.
pub fn concat_seq<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (da, db) = (a.dims(), b.dims());
    if (da.batch, da.heads, da.dim) != (db.batch, db.heads, db.dim) {
        return Err(IsaError::layout(format!("cannot concatenate {da} and {db}")));
    }
    let heads = a
        .heads()
        .zip(b.heads())
        .map(|(x, y)| {
            let mut v = Vec::with_capacity(x.as_slice().len() + y.as_slice().len());
            v.extend_from_slice(x.as_slice());
            v.extend_from_slice(y.as_slice());
            v
        })
        .collect();
    Tensor4::from_heads(da.with_seq(da.seq + db.seq), heads)
}

/// Splits along the sequence axis at row `at`.
pub fn split_seq<T: Element>(x: &Tensor4<T>, at: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let dims = x.dims();
    if at > dims.seq {
        return Err(IsaError::layout(format!("split point {at} beyond sequence length {}", dims.seq)));
    }
    let d = dims.dim;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for h in x.heads() {
        left.push(h.as_slice()[..at * d].to_vec());
        right.push(h.as_slice()[at * d..].to_vec());
    }
    Ok((Tensor4::from_heads(dims.with_seq(at), left)?, Tensor4::from_heads(dims.with_seq(dims.seq - at), right)?))
}
