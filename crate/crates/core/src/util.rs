use rayon::prelude::*;

/// Runs `f` for every head slice index, in parallel unless `parallel` is false.
///
/// Each call is independent and results come back in index order, so the
/// output never depends on the thread count.
pub(crate) fn map_heads<R, F>(n: usize, parallel: bool, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if parallel && n > 1 {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `floor(ratio * n)`, tolerant of the representation error in products
/// like `0.29 * 100`.
pub(crate) fn ratio_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}
