//! Block partitioning of the sequence axis.
//!
//! A [`BlockLayout`] splits a sequence of `seq_len` rows into contiguous
//! blocks of at most `block_size` rows. Padding is never materialized in the
//! attention kernels: each block records how many of its `block_size` slots
//! hold real rows, and every reduction runs over those rows only. The padded
//! coordinate system (block `u` occupies rows `u*b .. (u+1)*b`) is still
//! available through [`BlockLayout::padded_len`] and [`crate::blocks::pad`].
//!
//! A uniform layout pads only its final block. A segmented layout pads each
//! segment separately, which is how source and context tokens are kept in
//! disjoint blocks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{IsaError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    block_size: usize,
    seq_len: usize,
    starts: Vec<usize>,
    valid_rows: Vec<usize>,
}

impl BlockLayout {
    /// Uniform layout: every block full except possibly the last.
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        Self::segmented(&[seq_len], block_size)
    }

    /// Pads each segment independently, so no block straddles two segments.
    pub fn segmented(segments: &[usize], block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(IsaError::config("block size must be >= 1"));
        }
        let mut starts = Vec::new();
        let mut valid_rows = Vec::new();
        let mut pos = 0;
        for &seg in segments {
            let mut left = seg;
            while left > 0 {
                let n = left.min(block_size);
                starts.push(pos);
                valid_rows.push(n);
                pos += n;
                left -= n;
            }
        }
        Ok(BlockLayout { block_size, seq_len: pos, starts, valid_rows })
    }

    /// Builds a layout from explicit per-block row counts.
    pub fn from_valid_rows(valid_rows: Vec<usize>, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(IsaError::config("block size must be >= 1"));
        }
        let mut starts = Vec::with_capacity(valid_rows.len());
        let mut pos = 0;
        for &n in &valid_rows {
            if n == 0 || n > block_size {
                return Err(IsaError::layout(format!(
                    "block row count {n} outside [1, {block_size}]"
                )));
            }
            starts.push(pos);
            pos += n;
        }
        Ok(BlockLayout { block_size, seq_len: pos, starts, valid_rows })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_blocks(&self) -> usize {
        self.valid_rows.len()
    }

    pub fn padded_len(&self) -> usize {
        self.num_blocks() * self.block_size
    }

    pub fn valid_rows(&self, block: usize) -> usize {
        self.valid_rows[block]
    }

    pub fn valid_rows_all(&self) -> &[usize] {
        &self.valid_rows
    }

    /// Row range of `block` in unpadded coordinates.
    pub fn range(&self, block: usize) -> Range<usize> {
        let s = self.starts[block];
        s..s + self.valid_rows[block]
    }

    /// Row range of the valid part of `block` in padded coordinates.
    pub fn padded_range(&self, block: usize) -> Range<usize> {
        let s = block * self.block_size;
        s..s + self.valid_rows[block]
    }

    pub fn is_full(&self) -> bool {
        self.valid_rows.iter().all(|&n| n == self.block_size)
    }

    /// Block containing unpadded row `row`.
    pub fn block_of(&self, row: usize) -> Option<usize> {
        if row >= self.seq_len {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= row) - 1)
    }

    /// Layout of the rows obtained by gathering `blocks` in the given order.
    pub fn subset(&self, blocks: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(blocks.len());
        for &u in blocks {
            if u >= self.num_blocks() {
                return Err(IsaError::Index { index: u, limit: self.num_blocks() });
            }
            rows.push(self.valid_rows[u]);
        }
        BlockLayout::from_valid_rows(rows, self.block_size)
    }

    /// Layout of `self` followed by `other` along the sequence axis.
    pub fn concat(&self, other: &BlockLayout) -> Result<Self> {
        if self.block_size != other.block_size {
            return Err(IsaError::layout(format!(
                "cannot concatenate layouts with block sizes {} and {}",
                self.block_size, other.block_size
            )));
        }
        let mut rows = self.valid_rows.clone();
        rows.extend_from_slice(&other.valid_rows);
        BlockLayout::from_valid_rows(rows, self.block_size)
    }

    /// Total rows held by `blocks`.
    pub fn rows_in(&self, blocks: &[usize]) -> usize {
        blocks.iter().map(|&u| self.valid_rows[u]).sum()
    }

    pub(crate) fn check_seq(&self, seq: usize, what: &str) -> Result<()> {
        if seq != self.seq_len {
            return Err(IsaError::layout(format!(
                "{what} has sequence length {seq} but the block layout covers {}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Split of an attention input into source tokens followed by context tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclLayout {
    pub src_len: usize,
    pub ctx_len: usize,
}

impl IclLayout {
    pub fn new(src_len: usize, ctx_len: usize) -> Result<Self> {
        if src_len == 0 {
            return Err(IsaError::config("at least one source token is required"));
        }
        Ok(IclLayout { src_len, ctx_len })
    }

    pub fn total(&self) -> usize {
        self.src_len + self.ctx_len
    }

    pub fn src_blocks(&self, block_size: usize) -> usize {
        self.src_len.div_ceil(block_size)
    }

    pub fn ctx_blocks(&self, block_size: usize) -> usize {
        self.ctx_len.div_ceil(block_size)
    }

    /// Checks that both segments are whole multiples of `block_size`.
    pub fn check_strict(&self, block_size: usize) -> Result<()> {
        if block_size == 0 {
            return Err(IsaError::config("block size must be >= 1"));
        }
        if !self.src_len.is_multiple_of(block_size) || !self.ctx_len.is_multiple_of(block_size) {
            return Err(IsaError::config(format!(
                "strict mode needs source ({}) and context ({}) lengths divisible by block size {}",
                self.src_len, self.ctx_len, block_size
            )));
        }
        Ok(())
    }

    /// Block layout over the whole sequence with source and context padded separately.
    pub fn block_layout(&self, block_size: usize, strict: bool) -> Result<BlockLayout> {
        if strict {
            self.check_strict(block_size)?;
        }
        BlockLayout::segmented(&[self.src_len, self.ctx_len], block_size)
    }

    pub fn check_total(&self, seq: usize) -> Result<()> {
        if self.total() != seq {
            return Err(IsaError::layout(format!(
                "source ({}) + context ({}) = {} does not match sequence length {seq}",
                self.src_len,
                self.ctx_len,
                self.total()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_layout_pads_last_block() {
        let l = BlockLayout::new(6, 4).unwrap();
        assert_eq!(l.num_blocks(), 2);
        assert_eq!(l.padded_len(), 8);
        assert_eq!(l.valid_rows_all(), &[4, 2]);
        assert_eq!(l.range(1), 4..6);
        assert_eq!(l.padded_range(1), 4..6);
        assert!(l.padded_len() - l.seq_len() < l.block_size());
        assert_eq!(l.valid_rows_all().iter().sum::<usize>(), 6);
    }

    #[test]
    fn segmented_layout_keeps_segments_apart() {
        let l = BlockLayout::segmented(&[5, 3], 4).unwrap();
        assert_eq!(l.valid_rows_all(), &[4, 1, 3]);
        assert_eq!(l.range(2), 5..8);
        assert_eq!(l.padded_range(2), 8..11);
        assert_eq!(l.block_of(4), Some(1));
        assert_eq!(l.block_of(5), Some(2));
        assert_eq!(l.block_of(8), None);
    }

    #[test]
    fn subset_and_concat() {
        let l = BlockLayout::new(10, 4).unwrap();
        let s = l.subset(&[2, 0]).unwrap();
        assert_eq!(s.valid_rows_all(), &[2, 4]);
        assert_eq!(s.seq_len(), 6);
        let c = l.concat(&s).unwrap();
        assert_eq!(c.valid_rows_all(), &[4, 4, 2, 2, 4]);
        assert!(matches!(l.subset(&[3]), Err(IsaError::Index { index: 3, limit: 3 })));
    }

    #[test]
    fn icl_strict_mode() {
        let icl = IclLayout::new(8, 6).unwrap();
        assert!(icl.block_layout(4, true).is_err());
        let l = icl.block_layout(4, false).unwrap();
        assert_eq!(l.valid_rows_all(), &[4, 4, 4, 2]);
        assert_eq!(icl.src_blocks(4), 2);
        assert_eq!(icl.ctx_blocks(4), 2);
        assert!(IclLayout::new(0, 3).is_err());
    }
}
