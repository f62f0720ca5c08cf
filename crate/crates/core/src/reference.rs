//! Exact softmax attention: the direct form, the block-wise online-softmax
//! form, and the analytic backward pass.
//!
//! All three accumulate in `f64`. Scores are `scale * <q_i, k_j>` and the
//! row maximum is always subtracted before exponentiation.

use crate::element::{dot, Element};
use crate::error::{IsaError, Result};
use crate::layout::BlockLayout;
use crate::tensor::{Dims, MatRef, Tensor4};
use crate::util::map_heads;

/// The usual `1/sqrt(D)` score scale.
pub fn default_scale(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

pub(crate) fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(IsaError::config(format!("scale must be finite and > 0, got {scale}")));
    }
    Ok(())
}

/// Row and key validity shared by every `(batch, head)` slice.
///
/// Masked keys get zero weight. Masked query rows produce zero output and
/// receive zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnMask {
    pub query_valid: Option<Vec<bool>>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn keys(key_valid: Vec<bool>) -> Self {
        AttnMask { query_valid: None, key_valid: Some(key_valid) }
    }

    fn query_ok(&self, i: usize) -> bool {
        self.query_valid.as_ref().is_none_or(|v| v[i])
    }

    fn key_ok(&self, j: usize) -> bool {
        self.key_valid.as_ref().is_none_or(|v| v[j])
    }

    fn check(&self, nq: usize, nk: usize) -> Result<()> {
        if self.query_valid.as_ref().is_some_and(|v| v.len() != nq) {
            return Err(IsaError::layout("query mask length differs from query count"));
        }
        if self.key_valid.as_ref().is_some_and(|v| v.len() != nk) {
            return Err(IsaError::layout("key mask length differs from key count"));
        }
        Ok(())
    }
}

/// Running softmax statistics of one query row.
///
/// Holds the running maximum `m`, the normalizer `ell` (relative to `m`) and
/// the unnormalized output accumulator. The finalized output is `acc / ell`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    max: f64,
    norm: f64,
    acc: Vec<f64>,
}

impl OnlineState {
    pub fn new(dim: usize) -> Self {
        OnlineState { max: f64::NEG_INFINITY, norm: 0.0, acc: vec![0.0; dim] }
    }

    pub fn reset(&mut self) {
        self.max = f64::NEG_INFINITY;
        self.norm = 0.0;
        self.acc.iter_mut().for_each(|a| *a = 0.0);
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn acc(&self) -> &[f64] {
        &self.acc
    }

    /// Moves the reference maximum to `m_new >= max` and rescales.
    #[inline]
    fn rebase(&mut self, m_new: f64) {
        let alpha = if self.max == f64::NEG_INFINITY { 0.0 } else { (self.max - m_new).exp() };
        self.norm *= alpha;
        for a in &mut self.acc {
            *a *= alpha;
        }
        self.max = m_new;
    }

    /// Folds in one block of exact scores with their value rows.
    ///
    /// `values` holds `scores.len()` contiguous rows. Scores of `-inf` are
    /// masked keys.
    pub fn absorb_block<T: Element>(&mut self, scores: &[f64], values: &[T]) {
        let d = self.acc.len();
        debug_assert_eq!(values.len(), scores.len() * d);
        let row_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if row_max == f64::NEG_INFINITY {
            return;
        }
        self.rebase(self.max.max(row_max));
        for (j, &s) in scores.iter().enumerate() {
            if s == f64::NEG_INFINITY {
                continue;
            }
            let p = (s - self.max).exp();
            self.norm += p;
            for (a, v) in self.acc.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                *a += p * v.to_f64();
            }
        }
    }

    /// Folds in a single score standing for `weight` identical keys whose
    /// common value row is `value`.
    pub fn absorb_weighted<T: Element>(&mut self, score: f64, weight: f64, value: &[T]) {
        self.rebase(self.max.max(score));
        let p = (score - self.max).exp() * weight;
        self.norm += p;
        for (a, v) in self.acc.iter_mut().zip(value) {
            *a += p * v.to_f64();
        }
    }

    /// Writes `acc / ell`; returns false when nothing has been absorbed.
    pub fn finalize_into(&self, out: &mut [f64]) -> bool {
        if self.norm <= 0.0 {
            return false;
        }
        for (o, a) in out.iter_mut().zip(&self.acc) {
            *o = a / self.norm;
        }
        true
    }

    pub fn finalize(&self) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.acc.len()];
        self.finalize_into(&mut out).then_some(out)
    }
}

/// Gradients with respect to `Q`, `K` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T: Element> {
    pub dq: Tensor4<T>,
    pub dk: Tensor4<T>,
    pub dv: Tensor4<T>,
}

pub(crate) fn check_qkv<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>, v: &Tensor4<T>) -> Result<()> {
    let (dq, dk, dv) = (q.dims(), k.dims(), v.dims());
    if dk != dv {
        return Err(IsaError::layout(format!("K {dk} and V {dv} must have equal dims")));
    }
    if (dq.batch, dq.heads, dq.dim) != (dk.batch, dk.heads, dk.dim) {
        return Err(IsaError::layout(format!("Q {dq} does not match K {dk}")));
    }
    Ok(())
}

/// Direct softmax attention of one head. Returns the output rows in `f64`,
/// or the index of the first row with no valid key.
pub(crate) fn attend_direct<T: Element>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    scale: f64,
    mask: &AttnMask,
) -> std::result::Result<Vec<f64>, usize> {
    let d = q.cols();
    let nk = k.rows();
    let mut out = vec![0.0; q.rows() * d];
    let mut scores = vec![0.0; nk];
    for i in 0..q.rows() {
        if !mask.query_ok(i) {
            continue;
        }
        let qi = q.row(i);
        let mut m = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = if mask.key_ok(j) { scale * dot(qi, k.row(j)) } else { f64::NEG_INFINITY };
            m = m.max(*s);
        }
        if m == f64::NEG_INFINITY {
            return Err(i);
        }
        let mut norm = 0.0;
        let o = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            if s == f64::NEG_INFINITY {
                continue;
            }
            let p = (s - m).exp();
            norm += p;
            for (a, x) in o.iter_mut().zip(v.row(j)) {
                *a += p * x.to_f64();
            }
        }
        for a in o.iter_mut() {
            *a /= norm;
        }
    }
    Ok(out)
}

/// Online-softmax attention of one head, visiting key blocks in `order`.
pub(crate) fn attend_online<T: Element>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    layout: &BlockLayout,
    order: &[usize],
    scale: f64,
    mask: &AttnMask,
) -> std::result::Result<Vec<f64>, usize> {
    let d = q.cols();
    let mut out = vec![0.0; q.rows() * d];
    let mut state = OnlineState::new(d);
    let mut scores = Vec::with_capacity(layout.block_size());
    for i in 0..q.rows() {
        if !mask.query_ok(i) {
            continue;
        }
        let qi = q.row(i);
        state.reset();
        for &u in order {
            let r = layout.range(u);
            scores.clear();
            scores.extend(r.clone().map(|j| {
                if mask.key_ok(j) {
                    scale * dot(qi, k.row(j))
                } else {
                    f64::NEG_INFINITY
                }
            }));
            state.absorb_block(&scores, &v.as_slice()[r.start * d..r.end * d]);
        }
        if !state.finalize_into(&mut out[i * d..(i + 1) * d]) {
            return Err(i);
        }
    }
    Ok(out)
}

fn collect_heads<T: Element>(
    dims: Dims,
    results: Vec<std::result::Result<Vec<f64>, usize>>,
) -> Result<Tensor4<T>> {
    let mut heads = Vec::with_capacity(results.len());
    for (bh, r) in results.into_iter().enumerate() {
        match r {
            Ok(rows) => heads.push(rows.into_iter().map(T::from_f64).collect()),
            Err(row) => {
                return Err(IsaError::DegenerateRow { batch: bh / dims.heads, head: bh % dims.heads, row })
            }
        }
    }
    Tensor4::from_heads(dims, heads)
}

/// Dense softmax attention `softmax(scale * Q K^T) V`.
pub fn full_attention<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    scale: f64,
    mask: Option<&AttnMask>,
) -> Result<Tensor4<T>> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    let none = AttnMask::default();
    let mask = mask.unwrap_or(&none);
    mask.check(q.dims().seq, k.dims().seq)?;
    let n = q.dims().num_heads_total();
    let results = map_heads(n, true, |bh| attend_direct(q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), scale, mask));
    collect_heads(q.dims(), results)
}

/// Same contract as [`full_attention`], computed key block by key block with
/// an [`OnlineState`] per query row. Blocks are visited in ascending order.
pub fn online_softmax_attention<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    scale: f64,
    layout: &BlockLayout,
    mask: Option<&AttnMask>,
) -> Result<Tensor4<T>> {
    let order: Vec<usize> = (0..layout.num_blocks()).collect();
    online_softmax_attention_ordered(q, k, v, scale, layout, &order, mask)
}

/// [`online_softmax_attention`] with an explicit key-block visiting order,
/// which must be a permutation of all blocks.
pub fn online_softmax_attention_ordered<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    scale: f64,
    layout: &BlockLayout,
    order: &[usize],
    mask: Option<&AttnMask>,
) -> Result<Tensor4<T>> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    layout.check_seq(k.dims().seq, "key tensor")?;
    let mut seen = vec![false; layout.num_blocks()];
    for &u in order {
        if u >= seen.len() {
            return Err(IsaError::Index { index: u, limit: seen.len() });
        }
        if std::mem::replace(&mut seen[u], true) {
            return Err(IsaError::contract(format!("block {u} visited twice")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(IsaError::contract("visiting order must cover every key block"));
    }
    let none = AttnMask::default();
    let mask = mask.unwrap_or(&none);
    mask.check(q.dims().seq, k.dims().seq)?;
    let n = q.dims().num_heads_total();
    let results = map_heads(n, true, |bh| {
        attend_online(q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), layout, order, scale, mask)
    });
    collect_heads(q.dims(), results)
}

/// Per-head gradient buffers in `f64`.
pub(crate) struct HeadGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Backward of direct attention for one head. Accumulates into `g`.
///
/// The attention probabilities are recomputed from `q` and `k`.
pub(crate) fn attend_backward_into<T: Element>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    d_out: MatRef<'_, T>,
    scale: f64,
    mask: &AttnMask,
    g: &mut HeadGrads,
) -> std::result::Result<(), usize> {
    let d = q.cols();
    let nk = k.rows();
    let mut p = vec![0.0; nk];
    let mut dp = vec![0.0; nk];
    for i in 0..q.rows() {
        if !mask.query_ok(i) {
            continue;
        }
        let qi = q.row(i);
        let doi = d_out.row(i);
        let mut m = f64::NEG_INFINITY;
        for (j, s) in p.iter_mut().enumerate() {
            *s = if mask.key_ok(j) { scale * dot(qi, k.row(j)) } else { f64::NEG_INFINITY };
            m = m.max(*s);
        }
        if m == f64::NEG_INFINITY {
            return Err(i);
        }
        let mut norm = 0.0;
        for s in p.iter_mut() {
            *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - m).exp() };
            norm += *s;
        }
        // dP_ij = dO_i . V_j, and the softmax Jacobian contraction D_i = sum_j P_ij dP_ij.
        let mut row_dot = 0.0;
        for j in 0..nk {
            p[j] /= norm;
            dp[j] = if p[j] > 0.0 { dot(doi, v.row(j)) } else { 0.0 };
            row_dot += p[j] * dp[j];
        }
        let dqi = &mut g.dq[i * d..(i + 1) * d];
        for j in 0..nk {
            if p[j] == 0.0 {
                continue;
            }
            let ds = p[j] * (dp[j] - row_dot) * scale;
            let kj = k.row(j);
            for c in 0..d {
                dqi[c] += ds * kj[c].to_f64();
            }
            let dkj = &mut g.dk[j * d..(j + 1) * d];
            for c in 0..d {
                dkj[c] += ds * qi[c].to_f64();
            }
            let dvj = &mut g.dv[j * d..(j + 1) * d];
            for c in 0..d {
                dvj[c] += p[j] * doi[c].to_f64();
            }
        }
    }
    Ok(())
}

/// Analytic gradients of [`full_attention`] given the output gradient `d_out`.
pub fn full_attention_backward<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    scale: f64,
    d_out: &Tensor4<T>,
    mask: Option<&AttnMask>,
) -> Result<GradBundle<T>> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    if d_out.dims() != q.dims() {
        return Err(IsaError::layout(format!(
            "output gradient {} must match output dims {}",
            d_out.dims(),
            q.dims()
        )));
    }
    let none = AttnMask::default();
    let mask = mask.unwrap_or(&none);
    mask.check(q.dims().seq, k.dims().seq)?;
    let (qd, kd) = (q.dims(), k.dims());
    let n = qd.num_heads_total();
    let results = map_heads(n, true, |bh| {
        let mut g = HeadGrads {
            dq: vec![0.0; qd.head_len()],
            dk: vec![0.0; kd.head_len()],
            dv: vec![0.0; kd.head_len()],
        };
        attend_backward_into(q.head_flat(bh), k.head_flat(bh), v.head_flat(bh), d_out.head_flat(bh), scale, mask, &mut g)
            .map(|_| g)
    });
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for (bh, r) in results.into_iter().enumerate() {
        let g = r.map_err(|row| IsaError::DegenerateRow { batch: bh / qd.heads, head: bh % qd.heads, row })?;
        dq.push(g.dq.into_iter().map(T::from_f64).collect());
        dk.push(g.dk.into_iter().map(T::from_f64).collect());
        dv.push(g.dv.into_iter().map(T::from_f64).collect());
    }
    Ok(GradBundle {
        dq: Tensor4::from_heads(qd, dq)?,
        dk: Tensor4::from_heads(kd, dk)?,
        dv: Tensor4::from_heads(kd, dv)?,
    })
}
