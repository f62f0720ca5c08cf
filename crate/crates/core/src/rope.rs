//! Rotary position encoding with positions restarted per segment.

use crate::element::Element;
use crate::error::{IsaError, Result};
use crate::layout::IclLayout;
use crate::tensor::Tensor4;

/// Angle of feature pair `i` at position `pos`: `pos * base^(-2i/D)`.
pub fn rope_angle(pos: usize, pair: usize, dim: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * pair as f64 / dim as f64)
}

/// Rotates feature pairs `(2i, 2i+1)` of every row by its position angle.
///
/// Source rows take positions `0..L_src` and context rows, independently,
/// `0..L_ctx`, so the first row of each segment is left unchanged.
pub fn apply_decoupled_rope<T: Element>(x: &Tensor4<T>, icl: &IclLayout, base: f64) -> Result<Tensor4<T>> {
    let dims = x.dims();
    if !dims.dim.is_multiple_of(2) {
        return Err(IsaError::config(format!("rotary encoding needs an even head dim, got {}", dims.dim)));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(IsaError::config(format!("rotary base must be finite and > 0, got {base}")));
    }
    icl.check_total(dims.seq)?;
    let d = dims.dim;
    let half = d / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect();
    let mut out = x.as_slice().to_vec();
    for (r, row) in out.chunks_exact_mut(d).enumerate() {
        let s = r % dims.seq;
        let pos = if s < icl.src_len { s } else { s - icl.src_len } as f64;
        for (i, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos * f).sin_cos();
            let (a, b) = (row[2 * i].to_f64(), row[2 * i + 1].to_f64());
            row[2 * i] = T::from_f64(a * cos - b * sin);
            row[2 * i + 1] = T::from_f64(a * sin + b * cos);
        }
    }
    Tensor4::new(dims, out)
}
