//! The five-stage in-context sparse attention forward pass and its backward.
//!
//! 1. pool `Q`, `K`, `V` per block and score every block pair
//! 2. keep the most salient context blocks, forming `K_new` / `V_new`
//! 3. split query blocks by sharpness into sharp and flat groups
//! 4. flat queries run the Taylor kernel against `K_new`, sharp queries run
//!    exact attention against `K_new`
//! 5. scatter both results back, optionally adding the coarse residual
//!
//! Each stage runs over all `(batch, head)` slices before the next starts, so
//! the recorded stage times are wall-clock times.

use std::time::Instant;

use serde::Serialize;

use crate::blocks::{block_means_head, gather_rows, scatter_rows};
use crate::coarse::{
    check_ratio, coarse_scores_head, context_keep_count, exact_block_count, mask_lists_head, rank_context_head,
    sharpness_head, softmax, split_by_sharpness, BlockMask, SelectionIndex, SharpnessSplit,
};
use crate::element::{dot, Element, Precision};
use crate::error::{IsaError, Result};
use crate::flops::{exact_pair_mas, FlopCount};
use crate::layout::{BlockLayout, IclLayout};
use crate::reference::{attend_backward_into, attend_online, default_scale, AttnMask, GradBundle, HeadGrads};
use crate::taylor::{head_means, TaylorHead, VisitOrder};
use crate::tensor::{MatRef, Tensor4};
use crate::util::{map_heads, ratio_count};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsaConfig {
    /// Fraction of context blocks kept by pre-selection.
    pub alpha_s: f64,
    /// Fraction of `K_new` blocks computed exactly inside the Taylor kernel.
    pub alpha_ns: f64,
    /// Fraction of query blocks routed to the Taylor kernel.
    pub alpha_f: f64,
    /// Weight of the coarse residual added to the output.
    pub gamma: f64,
    pub block_size: usize,
    /// Score scale; `None` means `1/sqrt(D)`.
    pub scale: Option<f64>,
    /// Sharpness from the softmaxed coarse row instead of raw scores.
    pub softmax_first: bool,
    /// Softmax (with scale) the coarse scores before forming the residual.
    pub residual_softmax: bool,
    /// Run every stage on one thread.
    pub deterministic: bool,
    /// Require source and context lengths to be multiples of the block size.
    pub strict: bool,
    pub precision: Precision,
    pub trace: bool,
}

impl Default for IsaConfig {
    fn default() -> Self {
        IsaConfig {
            alpha_s: 0.125,
            alpha_ns: 0.0625,
            alpha_f: 0.5,
            gamma: 0.0,
            block_size: 64,
            scale: None,
            softmax_first: true,
            residual_softmax: true,
            deterministic: false,
            strict: true,
            precision: Precision::Single,
            trace: false,
        }
    }
}

impl IsaConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("alpha_s", self.alpha_s, true)?;
        check_ratio("alpha_ns", self.alpha_ns, false)?;
        check_ratio("alpha_f", self.alpha_f, true)?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(IsaError::config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.block_size == 0 {
            return Err(IsaError::config("block size must be >= 1"));
        }
        if let Some(s) = self.scale {
            crate::reference::check_scale(s)?;
        }
        Ok(())
    }

    pub fn scale_for(&self, dim: usize) -> f64 {
        self.scale.unwrap_or_else(|| default_scale(dim))
    }
}

/// Routing decisions of one `(batch, head)` slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadRouting {
    /// Retained context blocks, indexed within the context segment.
    pub selected: Vec<usize>,
    pub sharp: Vec<usize>,
    pub flat: Vec<usize>,
    pub sharpness: Vec<f64>,
    /// Exact `K_new` blocks for each flat query block, in `flat` order.
    pub mask: Vec<Vec<usize>>,
}

/// Every discrete decision of a forward pass. Holding it fixed makes the
/// forward map smooth in `Q`, `K`, `V`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Routing {
    pub heads: Vec<HeadRouting>,
    pub k_ctx: usize,
    pub k_exact: usize,
    pub num_new_blocks: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub coarse_us: u64,
    pub select_us: u64,
    pub split_us: u64,
    pub kernel_us: u64,
    pub reconstruct_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoarseSummary {
    pub query_blocks: usize,
    pub key_blocks: usize,
    pub score_min: f64,
    pub score_max: f64,
    pub score_mean: f64,
}

/// Observability record of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsaTrace {
    pub config: IsaConfig,
    pub seq_len: usize,
    pub icl: IclLayout,
    pub coarse: CoarseSummary,
    pub selection: SelectionIndex,
    pub split: SharpnessSplit,
    /// Mask of the flat query blocks (list `i` belongs to the `i`-th flat block).
    pub mask: BlockMask,
    pub k_new_len: Vec<usize>,
    pub flops: FlopCount,
    pub timings: StageTimings,
    pub peak_bytes_estimate: u64,
}

impl IsaTrace {
    /// Pretty-printed JSON document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Per-head kernel output: flat masks, flat rows, sharp rows, tallies.
type HeadKernel = (Vec<Vec<usize>>, Vec<f64>, Vec<f64>, FlopCount);

struct Stage1<T> {
    qc: Vec<T>,
    vc: Vec<T>,
    scores: Vec<f64>,
}

struct Stage2<T> {
    /// Blocks of the full layout that make up `K_new`, in order.
    new_blocks: Vec<usize>,
    layout: BlockLayout,
    k: Vec<T>,
    v: Vec<T>,
    kc: Vec<T>,
    vc: Vec<T>,
}

/// Checked shapes shared by forward and backward.
struct Setup {
    layout: BlockLayout,
    n_src: usize,
    n_ctx: usize,
    k_ctx: usize,
    k_exact: usize,
    scale: f64,
    parallel: bool,
}

fn setup<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>, icl: &IclLayout, cfg: &IsaConfig) -> Result<Setup> {
    cfg.validate()?;
    let dims = q.dims();
    if k.dims() != dims || v.dims() != dims {
        return Err(IsaError::layout(format!("Q {}, K {}, V {} must share dims", dims, k.dims(), v.dims())));
    }
    icl.check_total(dims.seq)?;
    let b = cfg.block_size;
    let layout = icl.block_layout(b, cfg.strict)?;
    let n_src = icl.src_blocks(b);
    let n_ctx = icl.ctx_blocks(b);
    let k_ctx = context_keep_count(cfg.alpha_s, n_ctx);
    let k_exact = exact_block_count(cfg.alpha_ns, n_src + k_ctx);
    Ok(Setup { layout, n_src, n_ctx, k_ctx, k_exact, scale: cfg.scale_for(dims.dim), parallel: !cfg.deterministic })
}

fn stage1<T: Element>(q: MatRef<'_, T>, k: MatRef<'_, T>, v: MatRef<'_, T>, s: &Setup) -> Stage1<T> {
    let qc = head_means(q, &s.layout);
    let kc = head_means(k, &s.layout);
    let vc = head_means(v, &s.layout);
    let scores = coarse_scores_head(&qc, &kc, q.cols(), s.scale);
    Stage1 { qc, vc, scores }
}

fn stage2<T: Element>(k: MatRef<'_, T>, v: MatRef<'_, T>, s: &Setup, selected: &[usize]) -> Stage2<T> {
    let new_blocks: Vec<usize> = (0..s.n_src).chain(selected.iter().map(|&c| s.n_src + c)).collect();
    let layout = s.layout.subset(&new_blocks).expect("selected blocks are in range");
    let d = k.cols();
    let k_new = gather_rows(k, &s.layout, &new_blocks);
    let v_new = gather_rows(v, &s.layout, &new_blocks);
    let kc = head_means(MatRef::new(&k_new, layout.seq_len(), d), &layout);
    let vc = head_means(MatRef::new(&v_new, layout.seq_len(), d), &layout);
    Stage2 { new_blocks, layout, k: k_new, v: v_new, kc, vc }
}

/// Exact-block lists of the flat query blocks against `K_new`.
fn flat_mask<T: Element>(st1: &Stage1<T>, st2: &Stage2<T>, flat: &[usize], d: usize, s: &Setup) -> Vec<Vec<usize>> {
    let qc_flat: Vec<T> = flat.iter().flat_map(|&i| st1.qc[i * d..(i + 1) * d].iter().copied()).collect();
    let scores = coarse_scores_head(&qc_flat, &st2.kc, d, s.scale);
    mask_lists_head(&scores, flat.len(), st2.layout.num_blocks(), s.k_exact)
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

fn check_routing(routing: &Routing, heads: usize, s: &Setup) -> Result<()> {
    let nq = s.layout.num_blocks();
    if routing.heads.len() != heads || routing.num_new_blocks != s.n_src + s.k_ctx {
        return Err(IsaError::contract("routing does not belong to these inputs"));
    }
    for h in &routing.heads {
        crate::blocks::check_index_list(&h.selected, s.n_ctx)?;
        crate::blocks::check_index_list(&h.sharp, nq)?;
        crate::blocks::check_index_list(&h.flat, nq)?;
        if h.selected.len() != s.k_ctx || h.mask.len() != h.flat.len() {
            return Err(IsaError::contract("routing lists have the wrong lengths"));
        }
        let mut seen = vec![0u8; nq];
        for &i in h.sharp.iter().chain(&h.flat) {
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(IsaError::contract("sharp and flat groups must partition the query blocks"));
        }
        for l in &h.mask {
            if l.is_empty() {
                return Err(IsaError::contract("every flat block needs an exact key block"));
            }
            crate::blocks::check_index_list(l, routing.num_new_blocks)?;
        }
    }
    Ok(())
}

/// Computes the routing decisions of a forward pass without running the kernels.
pub fn compute_routing<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
) -> Result<Routing> {
    let s = setup(q, k, v, icl, cfg)?;
    let d = q.dims().dim;
    let heads = map_heads(q.dims().num_heads_total(), s.parallel, |bh| {
        let st1 = stage1(q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), &s);
        route_head(&st1, k.head_flat(bh), v.head_flat(bh), d, cfg, &s)
    });
    Ok(Routing { heads, k_ctx: s.k_ctx, k_exact: s.k_exact, num_new_blocks: s.n_src + s.k_ctx })
}

fn route_head<T: Element>(
    st1: &Stage1<T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    d: usize,
    cfg: &IsaConfig,
    s: &Setup,
) -> HeadRouting {
    let nq = s.layout.num_blocks();
    let selected = rank_context_head(&st1.scores, nq, s.n_src, s.n_ctx, s.k_ctx);
    let sharpness = sharpness_head(&st1.scores, nq, nq, s.n_src, cfg.softmax_first);
    let (sharp, flat) = split_by_sharpness(&sharpness, ratio_count(cfg.alpha_f, nq));
    let st2 = stage2(k, v, s, &selected);
    let mask = flat_mask(st1, &st2, &flat, d, s);
    HeadRouting { selected, sharp, flat, sharpness, mask }
}

/// Coarse residual rows, one per query block: `sum_j w_ij vc_j` with `w` the
/// scaled row softmax of the coarse scores, or the raw unscaled dot products.
fn residual_rows<T: Element>(st1: &Stage1<T>, d: usize, nq: usize, s: &Setup, softmax_rows: bool) -> Vec<f64> {
    let nk = nq;
    let mut out = vec![0.0; nq * d];
    for i in 0..nq {
        let row = &st1.scores[i * nk..(i + 1) * nk];
        let w: Vec<f64> = if softmax_rows { softmax(row) } else { row.iter().map(|x| x / s.scale).collect() };
        for (j, wj) in w.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += wj * st1.vc[j * d + c].to_f64();
            }
        }
    }
    out
}

/// Runs the forward pass with the given routing held fixed.
pub fn isa_forward_routed<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
    routing: &Routing,
) -> Result<Tensor4<T>> {
    run_forward(q, k, v, icl, cfg, Some(routing)).map(|(o, _)| o)
}

/// In-context sparse attention forward pass.
///
/// Returns the output and, when `cfg.trace` is set, the trace of the run.
pub fn isa_forward<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
) -> Result<(Tensor4<T>, Option<IsaTrace>)> {
    let (out, trace) = run_forward(q, k, v, icl, cfg, None)?;
    Ok((out, cfg.trace.then_some(trace)))
}

fn run_forward<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
    frozen: Option<&Routing>,
) -> Result<(Tensor4<T>, IsaTrace)> {
    let t_total = Instant::now();
    let s = setup(q, k, v, icl, cfg)?;
    let dims = q.dims();
    let (d, nh, nq) = (dims.dim, dims.num_heads_total(), s.layout.num_blocks());
    if let Some(r) = frozen {
        check_routing(r, nh, &s)?;
    }

    let t = Instant::now();
    let st1: Vec<Stage1<T>> =
        map_heads(nh, s.parallel, |bh| stage1(q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), &s));
    let coarse_us = micros(t);

    let t = Instant::now();
    let selected: Vec<Vec<usize>> = match frozen {
        Some(r) => r.heads.iter().map(|h| h.selected.clone()).collect(),
        None => map_heads(nh, s.parallel, |bh| rank_context_head(&st1[bh].scores, nq, s.n_src, s.n_ctx, s.k_ctx)),
    };
    let st2: Vec<Stage2<T>> =
        map_heads(nh, s.parallel, |bh| stage2(k.head_flat(bh), v.head_flat(bh), &s, &selected[bh]));
    let select_us = micros(t);

    let t = Instant::now();
    let n_flat = ratio_count(cfg.alpha_f, nq);
    let splits: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> = map_heads(nh, s.parallel, |bh| {
        let m = sharpness_head(&st1[bh].scores, nq, nq, s.n_src, cfg.softmax_first);
        match frozen {
            Some(r) => (r.heads[bh].sharp.clone(), r.heads[bh].flat.clone(), m),
            None => {
                let (sharp, flat) = split_by_sharpness(&m, n_flat);
                (sharp, flat, m)
            }
        }
    });
    let split_us = micros(t);

    let t = Instant::now();
    let kernel: Vec<HeadKernel> = map_heads(nh, s.parallel, |bh| {
        let (sharp, flat, _) = &splits[bh];
        let st2 = &st2[bh];
        let mut flops = FlopCount::default();
        let mask = match frozen {
            Some(r) => r.heads[bh].mask.clone(),
            None => {
                let m = flat_mask(&st1[bh], st2, flat, d, &s);
                flops.overhead_mas += 2 * (flat.len() * st2.layout.num_blocks() * d) as u64;
                m
            }
        };
        let qh = q.head_flat(bh);
        let k_new = MatRef::new(&st2.k, st2.layout.seq_len(), d);
        let v_new = MatRef::new(&st2.v, st2.layout.seq_len(), d);

        let q_flat = gather_rows(qh, &s.layout, flat);
        let flat_layout = s.layout.subset(flat).expect("flat blocks in range");
        let taylor = TaylorHead {
            q: MatRef::new(&q_flat, flat_layout.seq_len(), d),
            q_layout: &flat_layout,
            k: k_new,
            v: v_new,
            kv_layout: &st2.layout,
            kc: &st2.kc,
            vc: &st2.vc,
            lists: &mask,
            scale: s.scale,
        };
        let out_flat = taylor.forward(VisitOrder::ExactFirst, &mut flops);

        let q_sharp = gather_rows(qh, &s.layout, sharp);
        let n_sharp = s.layout.rows_in(sharp);
        let order: Vec<usize> = (0..st2.layout.num_blocks()).collect();
        let out_sharp = attend_online(
            MatRef::new(&q_sharp, n_sharp, d),
            k_new,
            v_new,
            &st2.layout,
            &order,
            s.scale,
            &AttnMask::default(),
        )
        .expect("K_new always holds the source blocks");
        flops.exact_mas += exact_pair_mas(n_sharp, st2.layout.seq_len(), d);
        (mask, out_flat, out_sharp, flops)
    });
    let kernel_us = micros(t);

    let t = Instant::now();
    let outputs: Vec<Result<Vec<T>>> = map_heads(nh, s.parallel, |bh| {
        let (sharp, flat, _) = &splits[bh];
        let (_, out_flat, out_sharp, _) = &kernel[bh];
        let mut out = vec![0.0f64; dims.head_len()];
        let mut writes = vec![0u8; nq];
        for (blocks, rows) in [(sharp, out_sharp), (flat, out_flat)] {
            for &u in blocks.iter() {
                writes[u] += 1;
            }
            scatter_rows(&mut out, d, &s.layout, blocks, rows);
        }
        if writes.iter().any(|&w| w != 1) {
            return Err(IsaError::contract("query blocks must be written exactly once"));
        }
        if cfg.gamma > 0.0 {
            let res = residual_rows(&st1[bh], d, nq, &s, cfg.residual_softmax);
            for u in 0..nq {
                for r in s.layout.range(u) {
                    for c in 0..d {
                        out[r * d + c] += cfg.gamma * res[u * d + c];
                    }
                }
            }
        }
        Ok(out.into_iter().map(T::from_f64).collect())
    });
    let heads = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let out = Tensor4::from_heads(dims, heads).map_err(|e| match e {
        IsaError::Input(m) => IsaError::Input(format!("non-finite attention output: {m}")),
        e => e,
    })?;
    let reconstruct_us = micros(t);

    let mut flops: FlopCount = kernel.iter().map(|k| k.3).sum();
    let per_head_overhead = (3 * dims.seq * d + 2 * nq * nq * d) as u64;
    flops.overhead_mas += nh as u64 * per_head_overhead;
    if cfg.gamma > 0.0 {
        flops.overhead_mas += nh as u64 * (2 * nq * nq * d) as u64;
    }
    flops.dense_equivalent_mas += nh as u64 * crate::flops::dense_mas(dims.seq, dims.seq, d);

    let timings = StageTimings { coarse_us, select_us, split_us, kernel_us, reconstruct_us, total_us: micros(t_total) };
    let trace = build_trace(cfg, icl, &s, &st1, &st2, selected, splits, kernel, flops, timings, dims.heads, d, dims.seq);
    Ok((out, trace))
}

#[allow(clippy::too_many_arguments)]
fn build_trace<T: Element>(
    cfg: &IsaConfig,
    icl: &IclLayout,
    s: &Setup,
    st1: &[Stage1<T>],
    st2: &[Stage2<T>],
    selected: Vec<Vec<usize>>,
    splits: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)>,
    kernel: Vec<HeadKernel>,
    flops: FlopCount,
    timings: StageTimings,
    heads: usize,
    d: usize,
    seq: usize,
) -> IsaTrace {
    let nq = s.layout.num_blocks();
    let all_scores = st1.iter().flat_map(|h| h.scores.iter().copied());
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for x in all_scores {
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x;
        n += 1;
    }
    let mut split = SharpnessSplit { sharp: vec![], flat: vec![], sharpness: vec![], heads };
    for (sharp, flat, m) in splits {
        split.sharp.push(sharp);
        split.flat.push(flat);
        split.sharpness.push(m);
    }
    let mask = BlockMask {
        lists: kernel.into_iter().map(|k| k.0).collect(),
        k: s.k_exact,
        num_key_blocks: s.n_src + s.k_ctx,
    };
    let k_new_len: Vec<usize> = st2.iter().map(|h| h.layout.seq_len()).collect();
    let bytes = T::BYTES as u64;
    let max_new = k_new_len.iter().copied().max().unwrap_or(0) as u64;
    let per_head = (4 * seq as u64 + 2 * max_new + 5 * nq as u64) * d as u64 * bytes + (nq * nq) as u64 * 8;
    IsaTrace {
        config: cfg.clone(),
        seq_len: seq,
        icl: *icl,
        coarse: CoarseSummary {
            query_blocks: nq,
            key_blocks: nq,
            score_min: lo,
            score_max: hi,
            score_mean: if n > 0 { sum / n as f64 } else { 0.0 },
        },
        selection: SelectionIndex { lists: selected, k_ctx: s.k_ctx, num_ctx_blocks: s.n_ctx, heads },
        split,
        mask,
        k_new_len,
        flops,
        timings,
        peak_bytes_estimate: per_head * st1.len() as u64,
    }
}

/// Gradients of the forward map with routing frozen at the base point.
///
/// Top-k selection and the sharpness split are treated as constants.
pub fn isa_backward<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
    d_out: &Tensor4<T>,
) -> Result<GradBundle<T>> {
    let routing = compute_routing(q, k, v, icl, cfg)?;
    isa_backward_routed(q, k, v, icl, cfg, &routing, d_out)
}

pub fn isa_backward_routed<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    cfg: &IsaConfig,
    routing: &Routing,
    d_out: &Tensor4<T>,
) -> Result<GradBundle<T>> {
    let s = setup(q, k, v, icl, cfg)?;
    let dims = q.dims();
    if d_out.dims() != dims {
        return Err(IsaError::layout(format!("output gradient {} must match {}", d_out.dims(), dims)));
    }
    let nh = dims.num_heads_total();
    check_routing(routing, nh, &s)?;
    let (d, nq) = (dims.dim, s.layout.num_blocks());
    let results: Vec<HeadGrads> = map_heads(nh, s.parallel, |bh| {
        let r = &routing.heads[bh];
        let (qh, kh, vh, gh) = (q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), d_out.head_flat(bh));
        let st2 = stage2(kh, vh, &s, &r.selected);
        let n_new = st2.layout.seq_len();
        let k_new = MatRef::new(&st2.k, n_new, d);
        let v_new = MatRef::new(&st2.v, n_new, d);
        let mut g_new = HeadGrads { dq: vec![], dk: vec![0.0; n_new * d], dv: vec![0.0; n_new * d] };
        let mut dq = vec![0.0; dims.head_len()];

        // flat branch through the Taylor surrogate
        let flat_layout = s.layout.subset(&r.flat).expect("flat blocks in range");
        let q_flat = gather_rows(qh, &s.layout, &r.flat);
        let go_flat = gather_rows(gh, &s.layout, &r.flat);
        g_new.dq = vec![0.0; q_flat.len()];
        TaylorHead {
            q: MatRef::new(&q_flat, flat_layout.seq_len(), d),
            q_layout: &flat_layout,
            k: k_new,
            v: v_new,
            kv_layout: &st2.layout,
            kc: &st2.kc,
            vc: &st2.vc,
            lists: &r.mask,
            scale: s.scale,
        }
        .backward(MatRef::new(&go_flat, flat_layout.seq_len(), d), &mut g_new);
        scatter_rows(&mut dq, d, &s.layout, &r.flat, &g_new.dq);

        // sharp branch through exact attention
        let n_sharp = s.layout.rows_in(&r.sharp);
        let q_sharp = gather_rows(qh, &s.layout, &r.sharp);
        let go_sharp = gather_rows(gh, &s.layout, &r.sharp);
        g_new.dq = vec![0.0; q_sharp.len()];
        attend_backward_into(
            MatRef::new(&q_sharp, n_sharp, d),
            k_new,
            v_new,
            MatRef::new(&go_sharp, n_sharp, d),
            s.scale,
            &AttnMask::default(),
            &mut g_new,
        )
        .expect("K_new always holds the source blocks");
        scatter_rows(&mut dq, d, &s.layout, &r.sharp, &g_new.dq);

        // adjoint of the gather/concat: K_new rows go back to their source positions
        let mut dk = vec![0.0; dims.head_len()];
        let mut dv = vec![0.0; dims.head_len()];
        for (pos, &u) in st2.new_blocks.iter().enumerate() {
            let from = st2.layout.range(pos);
            let to = s.layout.range(u);
            dk[to.start * d..to.end * d].copy_from_slice(&g_new.dk[from.start * d..from.end * d]);
            dv[to.start * d..to.end * d].copy_from_slice(&g_new.dv[from.start * d..from.end * d]);
        }

        let mut g = HeadGrads { dq, dk, dv };
        if cfg.gamma > 0.0 {
            residual_backward(qh, kh, vh, gh, &s, cfg, nq, &mut g);
        }
        g
    });
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for g in results {
        dq.push(conv(g.dq));
        dk.push(conv(g.dk));
        dv.push(conv(g.dv));
    }
    Ok(GradBundle { dq: Tensor4::from_heads(dims, dq)?, dk: Tensor4::from_heads(dims, dk)?, dv: Tensor4::from_heads(dims, dv)? })
}

/// Gradient of `gamma * residual` broadcast over query-block rows.
#[allow(clippy::too_many_arguments)]
fn residual_backward<T: Element>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    d_out: MatRef<'_, T>,
    s: &Setup,
    cfg: &IsaConfig,
    nq: usize,
    g: &mut HeadGrads,
) {
    let d = q.cols();
    let layout = &s.layout;
    let qc = block_means_head(q, layout);
    let kc = block_means_head(k, layout);
    let vc = block_means_head(v, layout);
    // summed output gradient of each query block
    let mut gb = vec![0.0; nq * d];
    for u in 0..nq {
        for r in layout.range(u) {
            for c in 0..d {
                gb[u * d + c] += cfg.gamma * d_out.row(r)[c].to_f64();
            }
        }
    }
    let (mut dqc, mut dkc, mut dvc) = (vec![0.0; nq * d], vec![0.0; nq * d], vec![0.0; nq * d]);
    for i in 0..nq {
        let qi = &qc[i * d..(i + 1) * d];
        let gi = &gb[i * d..(i + 1) * d];
        let raw: Vec<f64> = (0..nq).map(|j| dot(qi, &kc[j * d..(j + 1) * d])).collect();
        let dw: Vec<f64> = (0..nq).map(|j| dot(gi, &vc[j * d..(j + 1) * d])).collect();
        // dz: gradient on the score that multiplies q_i . k_j
        let (w, dz): (Vec<f64>, Vec<f64>) = if cfg.residual_softmax {
            let p = softmax(&raw.iter().map(|x| x * s.scale).collect::<Vec<_>>());
            let row: f64 = p.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let dz = p.iter().zip(&dw).map(|(pj, dwj)| pj * (dwj - row) * s.scale).collect();
            (p, dz)
        } else {
            (raw, dw)
        };
        for j in 0..nq {
            for c in 0..d {
                dvc[j * d + c] += w[j] * gi[c];
                dqc[i * d + c] += dz[j] * kc[j * d + c];
                dkc[j * d + c] += dz[j] * qi[c];
            }
        }
    }
    for u in 0..nq {
        let n = layout.valid_rows(u) as f64;
        for r in layout.range(u) {
            for c in 0..d {
                g.dq[r * d + c] += dqc[u * d + c] / n;
                g.dk[r * d + c] += dkc[u * d + c] / n;
                g.dv[r * d + c] += dvc[u * d + c] / n;
            }
        }
    }
}
