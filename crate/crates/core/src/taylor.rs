//! Block-wise 0-th order Taylor sparse attention.
//!
//! For a query block `i` with exact key-block set `I_i`, each query row runs
//! one [`OnlineState`]: blocks in `I_i` are folded in exactly, every other
//! key block `j` contributes a single score `scale * q . kc_j` standing for
//! `n_j` keys with common value `vc_j`, where `kc_j`, `vc_j` are the block
//! means and `n_j` the block's valid row count.
//!
//! The result is exactly a softmax over the *surrogate score row* in which
//! each approximated block's keys all carry the mean-key score. The backward
//! pass differentiates that surrogate map, including the block-mean maps.

use crate::blocks::block_means_head;
use crate::coarse::BlockMask;
use crate::element::{dot, Element};
use crate::error::{IsaError, Result};
use crate::flops::{dense_mas, exact_pair_mas, taylor_pair_mas, FlopCount};
use crate::layout::BlockLayout;
use crate::reference::{check_qkv, check_scale, GradBundle, HeadGrads, OnlineState};
use crate::tensor::{MatRef, Tensor4};
use crate::util::map_heads;

/// Order in which a query block visits its key blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum VisitOrder {
    /// Exact blocks ascending, then approximated blocks ascending.
    #[default]
    ExactFirst,
    TaylorFirst,
    /// All key blocks in ascending index order.
    Ascending,
    /// All key blocks in descending index order.
    Descending,
}

/// One head's view of the kernel inputs.
pub(crate) struct TaylorHead<'a, T> {
    pub q: MatRef<'a, T>,
    pub q_layout: &'a BlockLayout,
    pub k: MatRef<'a, T>,
    pub v: MatRef<'a, T>,
    pub kv_layout: &'a BlockLayout,
    pub kc: &'a [T],
    pub vc: &'a [T],
    pub lists: &'a [Vec<usize>],
    pub scale: f64,
}

impl<T: Element> TaylorHead<'_, T> {
    fn visit_plan(&self, list: &[usize], order: VisitOrder) -> Vec<(usize, bool)> {
        let nk = self.kv_layout.num_blocks();
        let mut exact = vec![false; nk];
        for &j in list {
            exact[j] = true;
        }
        match order {
            VisitOrder::ExactFirst | VisitOrder::TaylorFirst => {
                let ex = (0..nk).filter(|&j| exact[j]).map(|j| (j, true));
                let ap = (0..nk).filter(|&j| !exact[j]).map(|j| (j, false));
                if order == VisitOrder::ExactFirst {
                    ex.chain(ap).collect()
                } else {
                    ap.chain(ex).collect()
                }
            }
            VisitOrder::Ascending => (0..nk).map(|j| (j, exact[j])).collect(),
            VisitOrder::Descending => (0..nk).rev().map(|j| (j, exact[j])).collect(),
        }
    }

    pub fn forward(&self, order: VisitOrder, flops: &mut FlopCount) -> Vec<f64> {
        let d = self.q.cols();
        let mut out = vec![0.0; self.q.rows() * d];
        let mut state = OnlineState::new(d);
        let mut scores = Vec::with_capacity(self.kv_layout.block_size());
        for (i, list) in self.lists.iter().enumerate() {
            let rows = self.q_layout.range(i);
            let plan = self.visit_plan(list, order);
            for &(j, is_exact) in &plan {
                if is_exact {
                    flops.exact_mas += exact_pair_mas(rows.len(), self.kv_layout.valid_rows(j), d);
                } else {
                    flops.taylor_mas += taylor_pair_mas(rows.len(), d);
                }
            }
            for r in rows {
                let qr = self.q.row(r);
                state.reset();
                for &(j, is_exact) in &plan {
                    if is_exact {
                        let kr = self.kv_layout.range(j);
                        scores.clear();
                        scores.extend(kr.clone().map(|x| self.scale * dot(qr, self.k.row(x))));
                        state.absorb_block(&scores, &self.v.as_slice()[kr.start * d..kr.end * d]);
                    } else {
                        let s = self.scale * dot(qr, &self.kc[j * d..(j + 1) * d]);
                        let n = self.kv_layout.valid_rows(j) as f64;
                        state.absorb_weighted(s, n, &self.vc[j * d..(j + 1) * d]);
                    }
                }
                let ok = state.finalize_into(&mut out[r * d..(r + 1) * d]);
                debug_assert!(ok, "at least one key block is always visited");
            }
        }
        out
    }

    /// Accumulates gradients of the surrogate map into `g` (`dk`/`dv` are in
    /// key-row coordinates).
    pub fn backward(&self, d_out: MatRef<'_, T>, g: &mut HeadGrads) {
        let d = self.q.cols();
        let nk_blocks = self.kv_layout.num_blocks();
        let mut dkc = vec![0.0; nk_blocks * d];
        let mut dvc = vec![0.0; nk_blocks * d];
        // entries of the surrogate row: (exact key row | mean of block), score
        let mut entries: Vec<(Entry, f64)> = Vec::new();
        let mut out = vec![0.0; d];
        for (i, list) in self.lists.iter().enumerate() {
            let plan = self.visit_plan(list, VisitOrder::ExactFirst);
            for r in self.q_layout.range(i) {
                let qr = self.q.row(r);
                let dor = d_out.row(r);
                entries.clear();
                for &(j, is_exact) in &plan {
                    if is_exact {
                        for x in self.kv_layout.range(j) {
                            entries.push((Entry::Key(x), self.scale * dot(qr, self.k.row(x))));
                        }
                    } else {
                        entries.push((Entry::Mean(j), self.scale * dot(qr, &self.kc[j * d..(j + 1) * d])));
                    }
                }
                let m = entries.iter().fold(f64::NEG_INFINITY, |m, e| m.max(e.1));
                let mut norm = 0.0;
                for e in entries.iter_mut() {
                    let w = match e.0 {
                        Entry::Key(_) => 1.0,
                        Entry::Mean(j) => self.kv_layout.valid_rows(j) as f64,
                    };
                    e.1 = w * (e.1 - m).exp();
                    norm += e.1;
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                for e in entries.iter_mut() {
                    e.1 /= norm;
                    let val = self.entry_value(e.0);
                    for c in 0..d {
                        out[c] += e.1 * val[c].to_f64();
                    }
                }
                let row_dot: f64 = dor.iter().zip(&out).map(|(a, b)| a.to_f64() * b).sum();
                let dqr = &mut g.dq[r * d..(r + 1) * d];
                for &(entry, p) in &entries {
                    let val = self.entry_value(entry);
                    let dz = p * (dot(dor, val) - row_dot) * self.scale;
                    let (key, dk, dv): (&[T], &mut [f64], &mut [f64]) = match entry {
                        Entry::Key(x) => (self.k.row(x), &mut g.dk[x * d..(x + 1) * d], &mut g.dv[x * d..(x + 1) * d]),
                        Entry::Mean(j) => {
                            (&self.kc[j * d..(j + 1) * d], &mut dkc[j * d..(j + 1) * d], &mut dvc[j * d..(j + 1) * d])
                        }
                    };
                    for c in 0..d {
                        dqr[c] += dz * key[c].to_f64();
                        dk[c] += dz * qr[c].to_f64();
                        dv[c] += p * dor[c].to_f64();
                    }
                }
            }
        }
        // adjoint of the block mean: every valid row gets 1/n of the mean's gradient
        for j in 0..nk_blocks {
            let n = self.kv_layout.valid_rows(j) as f64;
            for x in self.kv_layout.range(j) {
                for c in 0..d {
                    g.dk[x * d + c] += dkc[j * d + c] / n;
                    g.dv[x * d + c] += dvc[j * d + c] / n;
                }
            }
        }
    }

    fn entry_value(&self, e: Entry) -> &[T] {
        let d = self.q.cols();
        match e {
            Entry::Key(x) => self.v.row(x),
            Entry::Mean(j) => &self.vc[j * d..(j + 1) * d],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Entry {
    Key(usize),
    Mean(usize),
}

/// Analytic tally for one head's mask.
pub(crate) fn head_flops(q_layout: &BlockLayout, kv_layout: &BlockLayout, lists: &[Vec<usize>], d: usize) -> FlopCount {
    let mut f = FlopCount::default();
    for (i, list) in lists.iter().enumerate() {
        let nq = q_layout.valid_rows(i);
        let exact_rows: usize = list.iter().map(|&j| kv_layout.valid_rows(j)).sum();
        f.exact_mas += exact_pair_mas(nq, exact_rows, d);
        f.taylor_mas += (kv_layout.num_blocks() - list.len()) as u64 * taylor_pair_mas(nq, d);
    }
    // pooling K and V
    f.overhead_mas += 2 * (kv_layout.seq_len() * d) as u64;
    f.dense_equivalent_mas += dense_mas(q_layout.seq_len(), kv_layout.seq_len(), d);
    f
}

/// Inputs of the Taylor kernel: queries, keys/values with their block means,
/// and the exact-block mask.
#[derive(Debug, Clone)]
pub struct TaylorKernelInput<'a, T: Element> {
    pub q: &'a Tensor4<T>,
    pub q_layout: BlockLayout,
    pub k: &'a Tensor4<T>,
    pub v: &'a Tensor4<T>,
    pub kv_layout: BlockLayout,
    pub kc: Tensor4<T>,
    pub vc: Tensor4<T>,
    pub mask: BlockMask,
    pub scale: f64,
}

impl<'a, T: Element> TaylorKernelInput<'a, T> {
    /// Builds the input, computing the key/value block means.
    pub fn new(
        q: &'a Tensor4<T>,
        q_layout: BlockLayout,
        k: &'a Tensor4<T>,
        v: &'a Tensor4<T>,
        kv_layout: BlockLayout,
        mask: BlockMask,
        scale: f64,
    ) -> Result<Self> {
        let kc = crate::blocks::block_mean(k, &kv_layout)?;
        let vc = crate::blocks::block_mean(v, &kv_layout)?;
        Self::with_means(q, q_layout, k, v, kv_layout, kc, vc, mask, scale)
    }

    /// Builds the input from precomputed block means. Debug builds check
    /// that the means match `k` and `v`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_means(
        q: &'a Tensor4<T>,
        q_layout: BlockLayout,
        k: &'a Tensor4<T>,
        v: &'a Tensor4<T>,
        kv_layout: BlockLayout,
        kc: Tensor4<T>,
        vc: Tensor4<T>,
        mask: BlockMask,
        scale: f64,
    ) -> Result<Self> {
        check_qkv(q, k, v)?;
        check_scale(scale)?;
        q_layout.check_seq(q.dims().seq, "query tensor")?;
        kv_layout.check_seq(k.dims().seq, "key tensor")?;
        let means_dims = k.dims().with_seq(kv_layout.num_blocks());
        if kc.dims() != means_dims || vc.dims() != means_dims {
            return Err(IsaError::layout("block means do not match the key layout"));
        }
        if mask.lists.len() != q.dims().num_heads_total()
            || mask.lists.iter().any(|h| h.len() != q_layout.num_blocks())
            || mask.num_key_blocks != kv_layout.num_blocks()
        {
            return Err(IsaError::layout("block mask does not match the query/key block counts"));
        }
        mask.validate()?;
        #[cfg(debug_assertions)]
        {
            let expect = crate::blocks::block_mean(k, &kv_layout)?;
            debug_assert!(
                expect.as_slice().iter().zip(kc.as_slice()).all(|(a, b)| (a.to_f64() - b.to_f64()).abs()
                    <= 1e-5 * (1.0 + a.to_f64().abs())),
                "kc is not the block mean of k"
            );
        }
        Ok(TaylorKernelInput { q, q_layout, k, v, kv_layout, kc, vc, mask, scale })
    }

    pub(crate) fn head(&self, bh: usize) -> TaylorHead<'_, T> {
        TaylorHead {
            q: self.q.head_flat(bh),
            q_layout: &self.q_layout,
            k: self.k.head_flat(bh),
            v: self.v.head_flat(bh),
            kv_layout: &self.kv_layout,
            kc: self.kc.head_flat(bh).as_slice(),
            vc: self.vc.head_flat(bh).as_slice(),
            lists: &self.mask.lists[bh],
            scale: self.scale,
        }
    }
}

/// Runs the kernel; returns the output and the multiply-adds actually executed.
pub fn taylor_sparse_forward_counted<T: Element>(
    input: &TaylorKernelInput<'_, T>,
    order: VisitOrder,
) -> Result<(Tensor4<T>, FlopCount)> {
    let dims = input.q.dims();
    let results = map_heads(dims.num_heads_total(), true, |bh| {
        let mut f = FlopCount::default();
        let out = input.head(bh).forward(order, &mut f);
        (out, f)
    });
    let d = dims.dim;
    let mut flops = FlopCount::default();
    let mut heads = Vec::with_capacity(results.len());
    for (out, f) in results {
        flops += f;
        heads.push(out.into_iter().map(T::from_f64).collect());
    }
    flops.overhead_mas += dims.num_heads_total() as u64 * 2 * (input.kv_layout.seq_len() * d) as u64;
    flops.dense_equivalent_mas +=
        dims.num_heads_total() as u64 * dense_mas(input.q_layout.seq_len(), input.kv_layout.seq_len(), d);
    Ok((Tensor4::from_heads(dims, heads)?, flops))
}

pub fn taylor_sparse_forward<T: Element>(input: &TaylorKernelInput<'_, T>) -> Result<Tensor4<T>> {
    taylor_sparse_forward_counted(input, VisitOrder::ExactFirst).map(|(o, _)| o)
}

/// Gradients of [`taylor_sparse_forward`] with respect to `q`, `k`, `v`.
///
/// The surrogate weights are recomputed from `q`, `k` and the block means.
/// Gradients reaching a block mean are spread evenly over the block's valid rows.
pub fn taylor_sparse_backward<T: Element>(input: &TaylorKernelInput<'_, T>, d_out: &Tensor4<T>) -> Result<GradBundle<T>> {
    let (qd, kd) = (input.q.dims(), input.k.dims());
    if d_out.dims() != qd {
        return Err(IsaError::layout(format!("output gradient {} must match {}", d_out.dims(), qd)));
    }
    let results = map_heads(qd.num_heads_total(), true, |bh| {
        let mut g = HeadGrads { dq: vec![0.0; qd.head_len()], dk: vec![0.0; kd.head_len()], dv: vec![0.0; kd.head_len()] };
        input.head(bh).backward(d_out.head_flat(bh), &mut g);
        g
    });
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for g in results {
        dq.push(conv(g.dq));
        dk.push(conv(g.dk));
        dv.push(conv(g.dv));
    }
    Ok(GradBundle { dq: Tensor4::from_heads(qd, dq)?, dk: Tensor4::from_heads(kd, dk)?, dv: Tensor4::from_heads(kd, dv)? })
}

/// Closed-form multiply-add tally of the kernel for this input's mask.
pub fn flop_count<T: Element>(input: &TaylorKernelInput<'_, T>) -> FlopCount {
    let d = input.q.dims().dim;
    input
        .mask
        .lists
        .iter()
        .map(|lists| head_flops(&input.q_layout, &input.kv_layout, lists, d))
        .sum()
}

/// Block means of one head in storage precision.
pub(crate) fn head_means<T: Element>(x: MatRef<'_, T>, layout: &BlockLayout) -> Vec<T> {
    block_means_head(x, layout).into_iter().map(T::from_f64).collect()
}
