//! Pooling attention and everything derived from the block-level score map:
//! context ranking, per-query-block key selection, and sharpness routing.
//!
//! All selections break ties toward the lower block index, so results are
//! deterministic and top-k sets are nested as `k` grows.

use std::fmt::Write as _;

use serde::Serialize;

use crate::element::Element;
use crate::error::{IsaError, Result};
use crate::layout::{BlockLayout, IclLayout};
use crate::reference::check_scale;
use crate::tensor::{Dims, Tensor4};
use crate::util::{map_heads, ratio_count};

/// Block means of `Q`, `K`, `V` and the block-level score map.
#[derive(Debug, Clone)]
pub struct CoarseSet<T: Element> {
    pub qc: Tensor4<T>,
    pub kc: Tensor4<T>,
    pub vc: Tensor4<T>,
    /// `(B, H, N_Q, N_K)` block scores.
    pub scores: Tensor4<f64>,
    /// Scale folded into `scores`, or `None` for raw dot products.
    pub scale: Option<f64>,
    pub q_layout: BlockLayout,
    pub kv_layout: BlockLayout,
}

impl<T: Element> CoarseSet<T> {
    pub fn scale_applied(&self) -> bool {
        self.scale.is_some()
    }

    pub fn num_query_blocks(&self) -> usize {
        self.q_layout.num_blocks()
    }

    pub fn num_key_blocks(&self) -> usize {
        self.kv_layout.num_blocks()
    }

    pub fn score(&self, bh: usize, i: usize, j: usize) -> f64 {
        self.scores.head_flat(bh).row(i)[j]
    }
}

/// `scale * qc_i . kc_j` for every block pair of one head, row-major `nq x nk`.
pub(crate) fn coarse_scores_head<T: Element>(qc: &[T], kc: &[T], d: usize, scale: f64) -> Vec<f64> {
    let nq = qc.len() / d;
    let nk = kc.len() / d;
    let mut s = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        let qi = &qc[i * d..(i + 1) * d];
        for j in 0..nk {
            s.push(scale * crate::element::dot(qi, &kc[j * d..(j + 1) * d]));
        }
    }
    s
}

/// Pools `Q` with `q_layout` and `K`, `V` with `kv_layout`, then scores every
/// pair of blocks.
pub fn build_coarse<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    q_layout: &BlockLayout,
    kv_layout: &BlockLayout,
    scale: Option<f64>,
) -> Result<CoarseSet<T>> {
    crate::reference::check_qkv(q, k, v)?;
    q_layout.check_seq(q.dims().seq, "query tensor")?;
    kv_layout.check_seq(k.dims().seq, "key tensor")?;
    if let Some(s) = scale {
        check_scale(s)?;
    }
    let qc = crate::blocks::block_mean(q, q_layout)?;
    let kc = crate::blocks::block_mean(k, kv_layout)?;
    let vc = crate::blocks::block_mean(v, kv_layout)?;
    let d = q.dims().dim;
    let nk = kv_layout.num_blocks();
    let heads = map_heads(q.dims().num_heads_total(), true, |bh| {
        coarse_scores_head(qc.head_flat(bh).as_slice(), kc.head_flat(bh).as_slice(), d, scale.unwrap_or(1.0))
    });
    let sd = Dims::new(q.dims().batch, q.dims().heads, q_layout.num_blocks(), nk.max(1));
    let scores = if nk == 0 { Tensor4::zeros(sd.with_seq(0))? } else { Tensor4::from_heads(sd, heads)? };
    Ok(CoarseSet { qc, kc, vc, scores, scale, q_layout: q_layout.clone(), kv_layout: kv_layout.clone() })
}

/// Indices of the `k` largest values, returned in ascending index order.
/// Equal values prefer the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx.sort_unstable();
    idx
}

fn head_label(bh: usize, heads: usize) -> String {
    format!("b={} h={}", bh / heads, bh % heads)
}

fn fmt_list(l: &[usize]) -> String {
    let items: Vec<String> = l.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(","))
}

/// Retained context blocks per `(batch, head)`, indexed within the context
/// segment (`0` is the first context block).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionIndex {
    pub lists: Vec<Vec<usize>>,
    pub k_ctx: usize,
    pub num_ctx_blocks: usize,
    pub heads: usize,
}

impl SelectionIndex {
    /// One line per `(batch, head)`: the sorted retained block list.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (bh, l) in self.lists.iter().enumerate() {
            let _ = writeln!(s, "{} selected={}", head_label(bh, self.heads), fmt_list(l));
        }
        s
    }
}

/// Number of context blocks kept for a select ratio.
pub fn context_keep_count(alpha_s: f64, num_ctx_blocks: usize) -> usize {
    ratio_count(alpha_s, num_ctx_blocks)
}

pub(crate) fn check_ratio(name: &str, value: f64, allow_zero: bool) -> Result<()> {
    let ok = value.is_finite() && value <= 1.0 && if allow_zero { value >= 0.0 } else { value > 0.0 };
    if !ok {
        let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
        return Err(IsaError::config(format!("{name} must lie in {range}, got {value}")));
    }
    Ok(())
}

/// Ranks one head's context blocks by their mean coarse score against the
/// source query blocks and keeps the top `k_ctx`.
pub(crate) fn rank_context_head(scores: &[f64], nk: usize, n_src: usize, n_ctx: usize, k_ctx: usize) -> Vec<usize> {
    if n_ctx == 0 || k_ctx == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; n_ctx];
    for i in 0..n_src {
        let row = &scores[i * nk..(i + 1) * nk];
        for (m, s) in mean.iter_mut().zip(&row[n_src..n_src + n_ctx]) {
            *m += s;
        }
    }
    for m in &mut mean {
        *m /= n_src as f64;
    }
    top_k(&mean, k_ctx)
}

/// Selects the `floor(alpha_s * ctx_blocks)` most salient context blocks.
///
/// Uses the source-query x context-key slice of the score map, averaged over
/// source query blocks.
pub fn rank_context<T: Element>(cs: &CoarseSet<T>, icl: &IclLayout, alpha_s: f64) -> Result<SelectionIndex> {
    check_ratio("alpha_s", alpha_s, true)?;
    let b = cs.kv_layout.block_size();
    let (n_src, n_ctx) = (icl.src_blocks(b), icl.ctx_blocks(b));
    if cs.num_key_blocks() != n_src + n_ctx || cs.num_query_blocks() != n_src + n_ctx {
        return Err(IsaError::layout(format!(
            "coarse map is {}x{} blocks but the ICL split has {} source + {} context blocks",
            cs.num_query_blocks(),
            cs.num_key_blocks(),
            n_src,
            n_ctx
        )));
    }
    let k_ctx = context_keep_count(alpha_s, n_ctx);
    let nk = cs.num_key_blocks();
    let lists = (0..cs.scores.dims().num_heads_total())
        .map(|bh| rank_context_head(cs.scores.head_flat(bh).as_slice(), nk, n_src, n_ctx, k_ctx))
        .collect();
    Ok(SelectionIndex { lists, k_ctx, num_ctx_blocks: n_ctx, heads: cs.scores.dims().heads })
}

/// Exactly computed key blocks per query block, per `(batch, head)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockMask {
    /// `lists[bh][i]` is the sorted list of exact key blocks of query block `i`.
    pub lists: Vec<Vec<Vec<usize>>>,
    pub k: usize,
    pub num_key_blocks: usize,
}

impl BlockMask {
    /// A mask marking every key block exact.
    pub fn dense(heads_total: usize, num_query_blocks: usize, num_key_blocks: usize) -> Self {
        let all: Vec<usize> = (0..num_key_blocks).collect();
        BlockMask {
            lists: vec![vec![all; num_query_blocks]; heads_total],
            k: num_key_blocks,
            num_key_blocks,
        }
    }

    /// Checks every list is sorted, unique, in range and non-empty.
    pub fn validate(&self) -> Result<()> {
        for head in &self.lists {
            for l in head {
                if l.is_empty() {
                    return Err(IsaError::contract("every query block needs at least one exact key block"));
                }
                crate::blocks::check_index_list(l, self.num_key_blocks)?;
            }
        }
        Ok(())
    }
}

/// Exact blocks per query block for a no-sparsity ratio: `floor(alpha_ns * n)`, at least one.
pub fn exact_block_count(alpha_ns: f64, num_key_blocks: usize) -> usize {
    ratio_count(alpha_ns, num_key_blocks).max(1).min(num_key_blocks)
}

pub(crate) fn mask_lists_head(scores: &[f64], nq: usize, nk: usize, k: usize) -> Vec<Vec<usize>> {
    (0..nq).map(|i| top_k(&scores[i * nk..(i + 1) * nk], k)).collect()
}

/// Per query block, marks the `k` highest-scoring key blocks exact.
pub fn build_block_mask<T: Element>(cs: &CoarseSet<T>, alpha_ns: f64) -> Result<BlockMask> {
    check_ratio("alpha_ns", alpha_ns, false)?;
    build_block_mask_k(cs, exact_block_count(alpha_ns, cs.num_key_blocks()))
}

/// [`build_block_mask`] with an explicit per-block count.
pub fn build_block_mask_k<T: Element>(cs: &CoarseSet<T>, k: usize) -> Result<BlockMask> {
    let nk = cs.num_key_blocks();
    if k == 0 || k > nk {
        return Err(IsaError::config(format!("exact block count {k} outside [1, {nk}]")));
    }
    let nq = cs.num_query_blocks();
    let lists = (0..cs.scores.dims().num_heads_total())
        .map(|bh| mask_lists_head(cs.scores.head_flat(bh).as_slice(), nq, nk, k))
        .collect();
    Ok(BlockMask { lists, k, num_key_blocks: nk })
}

/// Query-block routing by sharpness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharpnessSplit {
    pub sharp: Vec<Vec<usize>>,
    pub flat: Vec<Vec<usize>>,
    /// Sharpness of every query block, per `(batch, head)`.
    pub sharpness: Vec<Vec<f64>>,
    pub heads: usize,
}

impl SharpnessSplit {
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for bh in 0..self.sharp.len() {
            let _ = writeln!(
                s,
                "{} sharp={} flat={}",
                head_label(bh, self.heads),
                fmt_list(&self.sharp[bh]),
                fmt_list(&self.flat[bh])
            );
        }
        s
    }
}

/// Row-wise softmax of a score slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Population variance, computed on values shifted by the first element so
/// that a constant slice gives exactly zero.
pub fn variance(x: &[f64]) -> f64 {
    let Some(&first) = x.first() else { return 0.0 };
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v - first).sum::<f64>() / n;
    let sq = x.iter().map(|v| (v - first) * (v - first)).sum::<f64>() / n;
    (sq - mean * mean).max(0.0)
}

/// Sharpness of one query block from its coarse scores against source key blocks.
pub fn block_sharpness(src_scores: &[f64], softmax_first: bool) -> f64 {
    if softmax_first {
        variance(&softmax(src_scores))
    } else {
        variance(src_scores)
    }
}

/// Sorts blocks by descending sharpness (ties: lower index first) and sends
/// the last `n_flat` to the flat group.
pub(crate) fn split_by_sharpness(m: &[f64], n_flat: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let cut = m.len() - n_flat.min(m.len());
    let mut sharp = order[..cut].to_vec();
    let mut flat = order[cut..].to_vec();
    sharp.sort_unstable();
    flat.sort_unstable();
    (sharp, flat)
}

pub(crate) fn sharpness_head(scores: &[f64], nq: usize, nk: usize, n_src: usize, softmax_first: bool) -> Vec<f64> {
    (0..nq)
        .map(|i| block_sharpness(&scores[i * nk..i * nk + n_src], softmax_first))
        .collect()
}

/// Splits all query blocks into sharp (exact attention) and flat (Taylor
/// kernel) groups, `floor(alpha_f * T_q)` of them flat.
///
/// Sharpness is the variance of a query block's coarse scores over the source
/// key blocks, taken after a row softmax when `softmax_first` is set.
pub fn sharpness_split<T: Element>(
    cs: &CoarseSet<T>,
    icl: &IclLayout,
    alpha_f: f64,
    softmax_first: bool,
) -> Result<SharpnessSplit> {
    check_ratio("alpha_f", alpha_f, true)?;
    let n_src = icl.src_blocks(cs.kv_layout.block_size());
    let nk = cs.num_key_blocks();
    if n_src == 0 || n_src > nk {
        return Err(IsaError::layout(format!("{n_src} source blocks do not fit a map with {nk} key blocks")));
    }
    let nq = cs.num_query_blocks();
    let n_flat = ratio_count(alpha_f, nq);
    let mut out = SharpnessSplit { sharp: vec![], flat: vec![], sharpness: vec![], heads: cs.scores.dims().heads };
    for bh in 0..cs.scores.dims().num_heads_total() {
        let m = sharpness_head(cs.scores.head_flat(bh).as_slice(), nq, nk, n_src, softmax_first);
        let (sharp, flat) = split_by_sharpness(&m, n_flat);
        out.sharp.push(sharp);
        out.flat.push(flat);
        out.sharpness.push(m);
    }
    Ok(out)
}
