//! Error measurement for the Taylor surrogate and summary statistics.

use std::io::Write;

use serde::Serialize;

use crate::blocks::{block_means_head, check_index_list};
use crate::coarse::softmax;
use crate::element::{dot, dot_mixed, Element};
use crate::error::{IsaError, Result};
use crate::layout::{BlockLayout, IclLayout};
use crate::reference::check_scale;
use crate::tensor::{MatRef, Tensor4};
use crate::util::map_heads;

/// Surrogate error statistics of one query block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockError {
    pub batch: usize,
    pub head: usize,
    pub block: usize,
    /// Mean squared L2 distance between the exact and surrogate distributions.
    pub eps: f64,
    /// Mean squared L2 norm of the surrogate distribution.
    pub m: f64,
    /// Mean of `|dz|^2` over the block's rows.
    pub e2: f64,
    /// Mean of `|dz|^4` over the block's rows.
    pub e4: f64,
    /// Largest pairwise distance between the block's query rows.
    pub diameter: f64,
    /// Largest slope of `|S2|^2` between two query rows of the block.
    pub lipschitz: f64,
    pub bound: Option<f64>,
}

impl BlockError {
    pub fn slack(&self) -> Option<f64> {
        self.bound.map(|b| b - self.eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub blocks: Vec<BlockError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub lipschitz: f64,
    pub diameter: f64,
    pub c_h: f64,
}

impl BoundConstants {
    /// The measured diameter and slope of `e`, with `C_H = 1`.
    pub fn surrogate(e: &BlockError) -> Self {
        BoundConstants { lipschitz: e.lipschitz, diameter: e.diameter, c_h: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("L", self.lipschitz), ("diameter", self.diameter), ("C_H", self.c_h)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(IsaError::config(format!("bound constant {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `(M + L * diameter) * E2 + C_H * E4`.
pub fn surrogate_error_bound(e: &BlockError, c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    Ok((e.m + c.lipschitz * c.diameter) * e.e2 + c.c_h * e.e4)
}

impl ErrorReport {
    /// Fills every block's bound. `lipschitz: None` uses each block's own
    /// measured slope.
    pub fn apply_bounds(&mut self, lipschitz: Option<f64>, c_h: f64) -> Result<()> {
        for e in &mut self.blocks {
            let c = BoundConstants { lipschitz: lipschitz.unwrap_or(e.lipschitz), diameter: e.diameter, c_h };
            e.bound = Some(surrogate_error_bound(e, &c)?);
        }
        Ok(())
    }

    /// Blocks whose error exceeds their bound.
    pub fn violations(&self) -> Vec<&BlockError> {
        self.blocks.iter().filter(|e| e.slack().is_some_and(|s| s < 0.0)).collect()
    }

    /// `(M, eps)` pairs for [`sharpness_error_correlation`].
    pub fn samples(&self) -> Vec<(f64, f64)> {
        self.blocks.iter().map(|e| (e.m, e.eps)).collect()
    }

    /// One row per block: `batch,head,block,M_u,eps_u,E2,E4,bound,slack`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| IsaError::Io(std::io::Error::other(e));
        out.write_record(["batch", "head", "block", "M_u", "eps_u", "E2", "E4", "bound", "slack"]).map_err(csv_err)?;
        for e in &self.blocks {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.write_record([
                e.batch.to_string(),
                e.head.to_string(),
                e.block.to_string(),
                e.m.to_string(),
                e.eps.to_string(),
                e.e2.to_string(),
                e.e4.to_string(),
                opt(e.bound),
                opt(e.slack()),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Compares exact and surrogate attention distributions block by block.
///
/// `lists[bh][u]` holds the key blocks computed exactly for query block `u`
/// (an empty list approximates every key block). Each row's surrogate score
/// row repeats `scale * q . kc_j` over the keys of every approximated block
/// `j`.
pub fn taylor_error<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    layout: &BlockLayout,
    lists: &[Vec<Vec<usize>>],
    scale: f64,
    parallel: bool,
) -> Result<ErrorReport> {
    check_scale(scale)?;
    let dims = q.dims();
    if k.dims() != dims {
        return Err(IsaError::layout(format!("Q {} and K {} must share dims", dims, k.dims())));
    }
    layout.check_seq(dims.seq, "Q/K")?;
    let nb = layout.num_blocks();
    if lists.len() != dims.num_heads_total() || lists.iter().any(|l| l.len() != nb) {
        return Err(IsaError::layout("need one exact-block list per (batch, head, query block)"));
    }
    for l in lists.iter().flatten() {
        check_index_list(l, nb)?;
    }
    let per_head = map_heads(dims.num_heads_total(), parallel, |bh| {
        error_head(q.head_flat(bh), k.head_flat(bh), layout, &lists[bh], scale)
            .into_iter()
            .enumerate()
            .map(|(u, mut e)| {
                e.batch = bh / dims.heads;
                e.head = bh % dims.heads;
                e.block = u;
                e
            })
            .collect::<Vec<_>>()
    });
    Ok(ErrorReport { blocks: per_head.into_iter().flatten().collect() })
}

fn error_head<T: Element>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    layout: &BlockLayout,
    lists: &[Vec<usize>],
    scale: f64,
) -> Vec<BlockError> {
    let d = q.cols();
    let kc = block_means_head(k, layout);
    let nb = layout.num_blocks();
    let mut out = Vec::with_capacity(nb);
    let mut z = Vec::with_capacity(layout.seq_len());
    let mut zt = Vec::with_capacity(layout.seq_len());
    for (u, list) in lists.iter().enumerate() {
        let mut exact = vec![false; nb];
        for &j in list {
            exact[j] = true;
        }
        let rows = layout.range(u);
        let n = rows.len() as f64;
        let mut e = BlockError {
            batch: 0,
            head: 0,
            block: u,
            eps: 0.0,
            m: 0.0,
            e2: 0.0,
            e4: 0.0,
            diameter: 0.0,
            lipschitz: 0.0,
            bound: None,
        };
        let mut sharp = Vec::with_capacity(rows.len());
        for r in rows.clone() {
            let qr = q.row(r);
            z.clear();
            zt.clear();
            for j in 0..nb {
                let mean_score = (!exact[j]).then(|| scale * dot_mixed(qr, &kc[j * d..(j + 1) * d]));
                for x in layout.range(j) {
                    let s = scale * dot(qr, k.row(x));
                    z.push(s);
                    zt.push(mean_score.unwrap_or(s));
                }
            }
            let (p1, p2) = (softmax(&z), softmax(&zt));
            let eps: f64 = p1.iter().zip(&p2).map(|(a, b)| (a - b) * (a - b)).sum();
            let dz2: f64 = z.iter().zip(&zt).map(|(a, b)| (a - b) * (a - b)).sum();
            let m: f64 = p2.iter().map(|p| p * p).sum();
            e.eps += eps / n;
            e.m += m / n;
            e.e2 += dz2 / n;
            e.e4 += dz2 * dz2 / n;
            sharp.push(m);
        }
        for (a, ra) in rows.clone().enumerate() {
            for (b, rb) in rows.clone().enumerate().skip(a + 1) {
                let dist = q.row(ra).iter().zip(q.row(rb)).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>().sqrt();
                e.diameter = e.diameter.max(dist);
                if dist > 0.0 {
                    e.lipschitz = e.lipschitz.max((sharp[a] - sharp[b]).abs() / dist);
                }
            }
        }
        out.push(e);
    }
    out
}

/// Means of `eps` within one sharpness quantile bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bin {
    pub m_mean: f64,
    pub eps_mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub samples: usize,
    /// `None` when either coordinate is constant.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    /// Ten quantile bins of the samples sorted by sharpness.
    pub bins: Vec<Bin>,
    /// The same bins after min-max scaling both coordinates to `[0, 1]`.
    pub normalized_bins: Vec<Bin>,
    /// One plus the number of bins whose mean error is not below the previous bin's.
    pub monotone_bins: usize,
}

pub const NUM_BINS: usize = 10;

/// Correlation between sharpness and surrogate error over `(M, eps)` samples.
pub fn sharpness_error_correlation(samples: &[(f64, f64)]) -> Result<CorrelationReport> {
    if samples.len() < NUM_BINS {
        return Err(IsaError::Input(format!("need at least {NUM_BINS} samples, got {}", samples.len())));
    }
    if samples.iter().any(|(m, e)| !m.is_finite() || !e.is_finite()) {
        return Err(IsaError::Input("samples must be finite".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let bins = quantile_bins(&xs, &ys);
    let normalized_bins = quantile_bins(&min_max(&xs), &min_max(&ys));
    let monotone_bins = 1 + bins.windows(2).filter(|w| w[1].eps_mean >= w[0].eps_mean).count();
    Ok(CorrelationReport {
        samples: samples.len(),
        pearson: pearson(&xs, &ys),
        spearman: pearson(&ranks(&xs), &ranks(&ys)),
        bins,
        normalized_bins,
        monotone_bins,
    })
}

fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    x.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

fn quantile_bins(xs: &[f64], ys: &[f64]) -> Vec<Bin> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    (0..NUM_BINS)
        .map(|g| {
            let part = &idx[g * n / NUM_BINS..(g + 1) * n / NUM_BINS];
            let c = part.len() as f64;
            Bin {
                m_mean: part.iter().map(|&i| xs[i]).sum::<f64>() / c,
                eps_mean: part.iter().map(|&i| ys[i]).sum::<f64>() / c,
                count: part.len(),
            }
        })
        .collect()
}

/// Pearson correlation, `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SliceStats {
    pub mean: f64,
    pub max: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Quadrant {
    /// Statistics of the scaled scores in the slice.
    pub score: SliceStats,
    /// Statistics of each query row's softmax mass falling in the slice.
    pub mass: SliceStats,
}

/// Score and attention-mass statistics of the four source/context slices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantStats {
    pub label: String,
    pub src_src: Quadrant,
    pub src_ctx: Quadrant,
    pub ctx_src: Quadrant,
    pub ctx_ctx: Quadrant,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
    max: f64,
}

impl Moments {
    fn new() -> Self {
        Moments { max: f64::NEG_INFINITY, ..Default::default() }
    }

    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
        self.max = self.max.max(x);
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.max = self.max.max(o.max);
    }

    fn stats(&self) -> SliceStats {
        let mean = self.sum / self.n;
        SliceStats { mean, max: self.max, variance: (self.sum_sq / self.n - mean * mean).max(0.0) }
    }
}

/// Attention statistics split by query segment and key segment. Every query
/// row's softmax runs over all keys.
pub fn quadrant_stats<T: Element>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    icl: &IclLayout,
    scale: f64,
    label: &str,
) -> Result<QuadrantStats> {
    check_scale(scale)?;
    let dims = q.dims();
    if k.dims() != dims {
        return Err(IsaError::layout(format!("Q {} and K {} must share dims", dims, k.dims())));
    }
    icl.check_total(dims.seq)?;
    if icl.ctx_len == 0 {
        return Err(IsaError::config("quadrant statistics need at least one context token"));
    }
    let ls = icl.src_len;
    // [score, mass] moments for ss, sc, cs, cc
    let per_head: Vec<[[Moments; 2]; 4]> = map_heads(dims.num_heads_total(), false, |bh| {
        let (qh, kh) = (q.head_flat(bh), k.head_flat(bh));
        let mut acc = [[Moments::new(); 2]; 4];
        let mut z = vec![0.0; dims.seq];
        for i in 0..dims.seq {
            for (x, s) in z.iter_mut().enumerate() {
                *s = scale * dot(qh.row(i), kh.row(x));
            }
            let p = softmax(&z);
            let base = if i < ls { 0 } else { 2 };
            for (slot, keys) in [(base, 0..ls), (base + 1, ls..dims.seq)] {
                let mut mass = 0.0;
                for x in keys {
                    acc[slot][0].push(z[x]);
                    mass += p[x];
                }
                acc[slot][1].push(mass);
            }
        }
        acc
    });
    let mut total = [[Moments::new(); 2]; 4];
    for h in &per_head {
        for (t, s) in total.iter_mut().zip(h) {
            t[0].merge(&s[0]);
            t[1].merge(&s[1]);
        }
    }
    let quad = |i: usize| Quadrant { score: total[i][0].stats(), mass: total[i][1].stats() };
    Ok(QuadrantStats { label: label.to_string(), src_src: quad(0), src_ctx: quad(1), ctx_src: quad(2), ctx_ctx: quad(3) })
}

/// Row-wise relative error `|a_i - b_i| / |b_i|` (L2 over the feature axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelError {
    pub max: f64,
    pub mean: f64,
}

pub fn relative_error<T: Element>(approx: &Tensor4<T>, exact: &Tensor4<T>) -> Result<RelError> {
    if approx.dims() != exact.dims() {
        return Err(IsaError::layout(format!("cannot compare {} with {}", approx.dims(), exact.dims())));
    }
    let d = exact.dims().dim;
    let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for (a, b) in approx.as_slice().chunks_exact(d).zip(exact.as_slice().chunks_exact(d)) {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = b.iter().map(|y| y.to_f64().powi(2)).sum::<f64>().sqrt();
        let rel = if diff == 0.0 { 0.0 } else { diff / norm.max(f64::MIN_POSITIVE) };
        max = max.max(rel);
        sum += rel;
        n += 1;
    }
    Ok(RelError { max, mean: if n > 0 { sum / n as f64 } else { 0.0 } })
}

/// Kernel work of the sparse pipeline relative to dense attention, as
/// predicted from the ratios alone: `[af + (1 - af)(ans + (1 - ans)/b)] * |K_new| / S`.
pub fn flop_ratio_model(alpha_f: f64, alpha_ns: f64, block_size: usize, k_new_len: usize, seq: usize) -> f64 {
    let b = block_size as f64;
    (alpha_f + (1.0 - alpha_f) * (alpha_ns + (1.0 - alpha_ns) / b)) * k_new_len as f64 / seq as f64
}
