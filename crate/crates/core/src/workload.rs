//! Seeded synthetic `Q`, `K`, `V` with a source/context split.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! the workload seed and switched to stream `b * H + h` for each head, so a
//! head's tensors do not depend on the thread that generates them. Normals
//! are `rand_distr::StandardNormal`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::element::Element;
use crate::error::{IsaError, Result};
use crate::io::{read_tensor, sidecar_path, write_tensor, OffsetReader, Sidecar};
use crate::layout::{BlockLayout, IclLayout};
use crate::tensor::{Dims, Tensor4};
use crate::util::map_heads;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum WorkloadKind {
    IidGaussian,
    /// Every block of `Q` and `K` is drawn around one of `n_clusters` shared
    /// centers with per-row noise `sigma`. Query blocks get a random gain in
    /// `[0, 1)`, which spreads their coarse sharpness.
    Clustered { n_clusters: usize, sigma: f64 },
    /// `Q` and `K` rows lie near a shared rank-`rank` subspace.
    LowRank { rank: usize, sigma: f64 },
    Loaded(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub batch: usize,
    pub heads: usize,
    pub dim: usize,
    pub src_len: usize,
    pub ctx_len: usize,
    /// Block size that clustered draws align to.
    pub block_size: usize,
    pub kind: WorkloadKind,
    /// Multiplier in `[0, 1]` on the signal part of every context key.
    pub context_attenuation: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    /// One batch, four heads of dim 64, an even split and `S / (4b)` clusters.
    pub fn clustered(seq: usize, block_size: usize, seed: u64) -> Self {
        WorkloadSpec {
            batch: 1,
            heads: 4,
            dim: 64,
            src_len: seq / 2,
            ctx_len: seq - seq / 2,
            block_size,
            kind: WorkloadKind::Clustered { n_clusters: (seq / (4 * block_size)).max(1), sigma: 0.5 },
            context_attenuation: 1.0,
            seed,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.src_len + self.ctx_len
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.batch, self.heads, self.seq_len(), self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.heads == 0 || self.dim == 0 || self.block_size == 0 {
            return Err(IsaError::config("batch, heads, dim and block size must be >= 1"));
        }
        if self.src_len == 0 {
            return Err(IsaError::config("at least one source token is required"));
        }
        if !(0.0..=1.0).contains(&self.context_attenuation) {
            return Err(IsaError::config(format!(
                "context attenuation must lie in [0, 1], got {}",
                self.context_attenuation
            )));
        }
        let check_sigma = |s: f64| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(IsaError::config(format!("noise sigma must be finite and >= 0, got {s}")))
            }
        };
        match self.kind {
            WorkloadKind::Clustered { n_clusters, sigma } => {
                if n_clusters == 0 {
                    return Err(IsaError::config("need at least one cluster"));
                }
                check_sigma(sigma)
            }
            WorkloadKind::LowRank { rank, sigma } => {
                if rank == 0 {
                    return Err(IsaError::config("rank must be >= 1"));
                }
                check_sigma(sigma)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload<T: Element> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub icl: IclLayout,
}

struct HeadDraw {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn draw_head(spec: &WorkloadSpec, layout: &BlockLayout, bh: usize) -> HeadDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(bh as u64);
    let (s, d) = (spec.seq_len(), spec.dim);
    let a = spec.context_attenuation;
    let att = |row: usize| if row < spec.src_len { 1.0 } else { a };
    let mut q = vec![0.0; s * d];
    let mut k = vec![0.0; s * d];
    match spec.kind {
        WorkloadKind::IidGaussian | WorkloadKind::Loaded(_) => {
            for (r, (qr, kr)) in q.chunks_exact_mut(d).zip(k.chunks_exact_mut(d)).enumerate() {
                qr.iter_mut().for_each(|x| *x = normal(&mut rng));
                kr.iter_mut().for_each(|x| *x = att(r) * normal(&mut rng));
            }
        }
        WorkloadKind::Clustered { n_clusters, sigma } => {
            let centers = normals(&mut rng, n_clusters * d);
            let center = |m: usize| &centers[m * d..(m + 1) * d];
            for u in 0..layout.num_blocks() {
                let kc = rng.random_range(0..n_clusters);
                let qc = rng.random_range(0..n_clusters);
                let gain: f64 = rng.random();
                for r in layout.range(u) {
                    for c in 0..d {
                        k[r * d + c] = att(r) * center(kc)[c] + sigma * normal(&mut rng);
                        q[r * d + c] = gain * center(qc)[c] + sigma * normal(&mut rng);
                    }
                }
            }
        }
        WorkloadKind::LowRank { rank, sigma } => {
            let basis: Vec<f64> = normals(&mut rng, rank * d).into_iter().map(|x| x / (rank as f64).sqrt()).collect();
            for r in 0..s {
                let (cq, ck) = (normals(&mut rng, rank), normals(&mut rng, rank));
                for c in 0..d {
                    let (mut sq, mut sk) = (0.0, 0.0);
                    for t in 0..rank {
                        sq += cq[t] * basis[t * d + c];
                        sk += ck[t] * basis[t * d + c];
                    }
                    q[r * d + c] = sq + sigma * normal(&mut rng);
                    k[r * d + c] = att(r) * sk + sigma * normal(&mut rng);
                }
            }
        }
    }
    let v = normals(&mut rng, s * d);
    HeadDraw { q, k, v }
}

/// Draws a workload, or loads it for [`WorkloadKind::Loaded`].
pub fn generate<T: Element>(spec: &WorkloadSpec) -> Result<Workload<T>> {
    if let WorkloadKind::Loaded(path) = &spec.kind {
        return load(path);
    }
    spec.validate()?;
    let icl = IclLayout::new(spec.src_len, spec.ctx_len)?;
    let layout = icl.block_layout(spec.block_size, false)?;
    let dims = spec.dims();
    let draws = map_heads(dims.num_heads_total(), true, |bh| draw_head(spec, &layout, bh));
    let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
    let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for h in &draws {
        q.push(conv(&h.q));
        k.push(conv(&h.k));
        v.push(conv(&h.v));
    }
    Ok(Workload {
        q: Tensor4::from_heads(dims, q)?,
        k: Tensor4::from_heads(dims, k)?,
        v: Tensor4::from_heads(dims, v)?,
        icl,
    })
}

/// Writes `Q`, `K`, `V` back to back into `path` and the split into its
/// `.hdr` sidecar.
pub fn dump<T: Element>(path: impl AsRef<Path>, w: &Workload<T>) -> Result<()> {
    let path = path.as_ref();
    w.icl.check_total(w.q.dims().seq)?;
    let mut out = BufWriter::new(File::create(path)?);
    for t in [&w.q, &w.k, &w.v] {
        write_tensor(&mut out, t)?;
    }
    out.flush()?;
    std::fs::write(sidecar_path(path), Sidecar { icl: w.icl, precision: T::PRECISION }.render())?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    Sidecar::parse(&std::fs::read_to_string(sidecar_path(path.as_ref()))?)
}

/// Reads a workload written by [`dump`].
pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Workload<T>> {
    let path = path.as_ref();
    let side = read_sidecar(path)?;
    if side.precision != T::PRECISION {
        return Err(IsaError::Validation(format!(
            "file holds {} precision, {} was requested",
            side.precision,
            T::PRECISION
        )));
    }
    let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
    let q = read_tensor::<T, _>(&mut r)?;
    let k = read_tensor::<T, _>(&mut r)?;
    let v = read_tensor::<T, _>(&mut r)?;
    r.at_end()?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(IsaError::Validation(format!("Q {}, K {}, V {} differ", q.dims(), k.dims(), v.dims())));
    }
    if side.icl.total() != q.dims().seq {
        return Err(IsaError::Validation(format!(
            "header split {} + {} does not match sequence length {}",
            side.icl.src_len,
            side.icl.ctx_len,
            q.dims().seq
        )));
    }
    Ok(Workload { q, k, v, icl: side.icl })
}
