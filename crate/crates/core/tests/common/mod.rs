//! Independent reference computations for the integration tests.
#![allow(dead_code)]

use isa_core::{BlockLayout, Dims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: Dims, amp: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-amp..amp)).unwrap()
}

/// `|a - b|_inf / |b|_inf`.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let norm = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / norm.max(1e-300)
    }
}

fn row(x: &[f64], d: usize, i: usize) -> &[f64] {
    &x[i * d..(i + 1) * d]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted sum of `(score, value)` pairs, straight from the definition.
fn weighted(entries: &[(f64, Vec<f64>)], d: usize) -> Vec<f64> {
    let m = entries.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = entries.iter().map(|e| (e.0 - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; d];
    for (wi, e) in w.iter().zip(entries) {
        for (o, x) in out.iter_mut().zip(&e.1) {
            *o += wi / z * x;
        }
    }
    out
}

/// Dense softmax attention of every head.
pub fn naive_attention(q: &Tensor4<f64>, k: &Tensor4<f64>, v: &Tensor4<f64>, scale: f64) -> Vec<f64> {
    let d = q.dims().dim;
    let mut out = Vec::new();
    for ((qh, kh), vh) in q.heads().zip(k.heads()).zip(v.heads()) {
        for i in 0..qh.rows() {
            let entries: Vec<(f64, Vec<f64>)> =
                (0..kh.rows()).map(|j| (scale * dot(qh.row(i), kh.row(j)), vh.row(j).to_vec())).collect();
            out.extend(weighted(&entries, d));
        }
    }
    out
}

/// Block means of one head by plain summation.
pub fn means(x: &[f64], d: usize, layout: &BlockLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.num_blocks() * d];
    for u in 0..layout.num_blocks() {
        let r = layout.range(u);
        for i in r.clone() {
            for c in 0..d {
                out[u * d + c] += x[i * d + c];
            }
        }
        for c in 0..d {
            out[u * d + c] /= r.len() as f64;
        }
    }
    out
}

/// Softmax over the surrogate score row: exact keys for listed blocks, and
/// for every other block its mean-key score repeated once per key with the
/// mean value.
pub fn surrogate_attention(
    q: &Tensor4<f64>,
    q_layout: &BlockLayout,
    k: &Tensor4<f64>,
    v: &Tensor4<f64>,
    kv_layout: &BlockLayout,
    lists: &[Vec<Vec<usize>>],
    scale: f64,
) -> Vec<f64> {
    let d = q.dims().dim;
    let mut out = Vec::new();
    for (bh, ((qh, kh), vh)) in q.heads().zip(k.heads()).zip(v.heads()).enumerate() {
        let kc = means(kh.as_slice(), d, kv_layout);
        let vc = means(vh.as_slice(), d, kv_layout);
        for (u, exact_set) in lists[bh].iter().enumerate() {
            for i in q_layout.range(u) {
                let qi = qh.row(i);
                let mut entries = Vec::new();
                for j in 0..kv_layout.num_blocks() {
                    let exact = exact_set.contains(&j);
                    for x in kv_layout.range(j) {
                        if exact {
                            entries.push((scale * dot(qi, kh.row(x)), vh.row(x).to_vec()));
                        } else {
                            entries.push((scale * dot(qi, row(&kc, d, j)), row(&vc, d, j).to_vec()));
                        }
                    }
                }
                out.extend(weighted(&entries, d));
            }
        }
    }
    out
}

/// Per query block of one head: mean over rows of `|softmax(z) - softmax(z~)|^2`.
pub fn two_softmax_error(
    q: &[f64],
    k: &[f64],
    d: usize,
    layout: &BlockLayout,
    lists: &[Vec<usize>],
    scale: f64,
) -> Vec<f64> {
    let kc = means(k, d, layout);
    let sm = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    (0..layout.num_blocks())
        .map(|u| {
            let r = layout.range(u);
            let n = r.len() as f64;
            r.map(|i| {
                let qi = row(q, d, i);
                let mut z = Vec::new();
                let mut zt = Vec::new();
                for j in 0..layout.num_blocks() {
                    for x in layout.range(j) {
                        z.push(scale * dot(qi, row(k, d, x)));
                        zt.push(if lists[u].contains(&j) { scale * dot(qi, row(k, d, x)) } else { scale * dot(qi, row(&kc, d, j)) });
                    }
                }
                let (a, b) = (sm(&z), sm(&zt));
                a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
            })
            .sum()
        })
        .collect()
}

/// Central finite-difference gradient of `<d_out, f(x)>` with respect to `x`.
pub fn fd_grad(x: &Tensor4<f64>, d_out: &[f64], h: f64, f: impl Fn(&Tensor4<f64>) -> Vec<f64>) -> Vec<f64> {
    let base = x.as_slice().to_vec();
    let dims = x.dims();
    let loss = |data: Vec<f64>| dot(&f(&Tensor4::new(dims, data).unwrap()), d_out);
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[i] += h;
            dn[i] -= h;
            (loss(up) - loss(dn)) / (2.0 * h)
        })
        .collect()
}

/// A few sequence splits with ragged tails for block size 4.
pub fn ragged_splits() -> Vec<(usize, usize)> {
    vec![(5, 7), (9, 3), (4, 0), (3, 10), (13, 6)]
}
