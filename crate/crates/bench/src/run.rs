use std::fmt;
use std::time::Instant;

use anyhow::{Context, Result};
use isa_core::analysis::{flop_ratio_model, relative_error, RelError};
use isa_core::workload::{dump, generate};
use isa_core::{
    apply_decoupled_rope, build_block_mask, build_coarse, dense_mas, full_attention, isa_forward,
    online_softmax_attention, taylor_sparse_forward_counted, BlockLayout, Element, FlopCount, IclLayout, IsaTrace,
    Precision, StageTimings, TaylorKernelInput, Tensor4, VisitOrder,
};

use crate::args::{Mode, RunArgs};
use crate::report::{Params, Repeat, Row};

/// Nonfinite output or a failed `--assert-*` check.
#[derive(Debug)]
pub struct Numeric(pub Vec<String>);

impl fmt::Display for Numeric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NUMERIC: {}", self.0.join("; "))
    }
}

impl std::error::Error for Numeric {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub timings: StageTimings,
    pub flops: FlopCount,
    pub err: Option<RelError>,
}

/// Rows of one configuration plus anything the checks flagged.
#[derive(Debug)]
pub struct Cell {
    pub rows: Vec<Row>,
    pub trace: Option<IsaTrace>,
    pub problems: Vec<String>,
}

pub fn run_cell(args: &RunArgs) -> Result<Cell> {
    args.validate()?;
    match args.precision() {
        Precision::Single => run_typed::<f32>(args),
        Precision::Double => run_typed::<f64>(args),
    }
}

fn micros(t: Instant) -> u64 {
    t.elapsed().as_micros() as u64
}

fn run_typed<T: Element>(args: &RunArgs) -> Result<Cell> {
    let spec = args.workload_spec()?;
    let w = generate::<T>(&spec).context("preparing the workload")?;
    if let Some(path) = &args.dump {
        dump(path, &w).with_context(|| format!("writing {}", path.display()))?;
    }
    let (mut q, mut k) = (w.q, w.k);
    if args.rope {
        q = apply_decoupled_rope(&q, &w.icl, args.rope_base)?;
        k = apply_decoupled_rope(&k, &w.icl, args.rope_base)?;
    }
    let v = w.v;
    let cfg = args.isa_config();
    let scale = cfg.scale_for(q.dims().dim);
    let reference = match (args.mode, args.no_error) {
        (Mode::Full, _) | (_, true) => None,
        _ => Some(full_attention(&q, &k, &v, scale, None)?),
    };

    let params = Params::from_args(args, &w.icl);
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    let mut trace = None;
    for i in 0..args.warmups + args.repeats {
        let (out, mut m, tr) = measure(args, &q, &k, &v, &w.icl, scale)?;
        if i < args.warmups {
            continue;
        }
        let repeat = i - args.warmups;
        if out.as_slice().iter().any(|x| !x.to_f64().is_finite()) {
            problems.push(format!("repeat {repeat}: output has nonfinite values"));
        }
        if let Some(r) = &reference {
            m.err = Some(relative_error(&out, r)?);
        }
        if let (Some(tol), Some(e)) = (args.assert_max_err, m.err) {
            if e.max.is_nan() || e.max > tol {
                problems.push(format!("repeat {repeat}: max relative error {:e} exceeds {tol:e}", e.max));
            }
        }
        if let (Some(tol), Some(t)) = (args.assert_flop_model, &tr) {
            let model = flop_model(t);
            let ratio = m.flops.kernel_ratio();
            let off = (ratio / model - 1.0).abs();
            if off.is_nan() || off > tol {
                problems.push(format!("repeat {repeat}: MA ratio {ratio:.6} vs model {model:.6}"));
            }
        }
        rows.push(Row { params: params.clone(), repeat: Repeat::Index(repeat), m: Some(m) });
        trace = tr;
    }
    rows.push(Row::median(&params, &rows));
    Ok(Cell { rows, trace, problems })
}

/// Closed-form kernel MA ratio of a traced run, averaged over heads.
pub fn flop_model(t: &IsaTrace) -> f64 {
    let c = &t.config;
    let n = t.k_new_len.len() as f64;
    t.k_new_len.iter().map(|&len| flop_ratio_model(c.alpha_f, c.alpha_ns, c.block_size, len, t.seq_len)).sum::<f64>() / n
}

fn dense_count<T: Element>(q: &Tensor4<T>, k: &Tensor4<T>) -> FlopCount {
    let heads = q.dims().num_heads_total() as u64;
    let dense = heads * dense_mas(q.dims().seq, k.dims().seq, q.dims().dim);
    FlopCount { exact_mas: dense, taylor_mas: 0, overhead_mas: 0, dense_equivalent_mas: dense }
}

fn single_stage(us: u64) -> StageTimings {
    StageTimings { kernel_us: us, total_us: us, ..StageTimings::default() }
}

fn measure<T: Element>(
    args: &RunArgs,
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    icl: &IclLayout,
    scale: f64,
) -> Result<(Tensor4<T>, Measurement, Option<IsaTrace>)> {
    let measured = |out, timings, flops| Measurement { timings, flops, err: None }.with(out);
    match args.mode {
        Mode::Full => {
            let t = Instant::now();
            let out = full_attention(q, k, v, scale, None)?;
            Ok(measured(out, single_stage(micros(t)), dense_count(q, k)))
        }
        Mode::Online => {
            let layout = BlockLayout::new(k.dims().seq, args.block_size)?;
            let t = Instant::now();
            let out = online_softmax_attention(q, k, v, scale, &layout, None)?;
            Ok(measured(out, single_stage(micros(t)), dense_count(q, k)))
        }
        Mode::Taylor => {
            let layout = icl.block_layout(args.block_size, !args.non_strict)?;
            let start = Instant::now();
            let cs = build_coarse(q, k, v, &layout, &layout, Some(scale))?;
            let coarse_us = micros(start);
            let t = Instant::now();
            let mask = build_block_mask(&cs, args.alpha_ns)?;
            let select_us = micros(t);
            let t = Instant::now();
            let input = TaylorKernelInput::with_means(q, layout.clone(), k, v, layout, cs.kc, cs.vc, mask, scale)?;
            let (out, flops) = taylor_sparse_forward_counted(&input, VisitOrder::ExactFirst)?;
            let kernel_us = micros(t);
            let timings = StageTimings { coarse_us, select_us, kernel_us, total_us: micros(start), ..StageTimings::default() };
            Ok(measured(out, timings, flops))
        }
        Mode::Isa => {
            let (out, trace) = isa_forward(q, k, v, icl, &args.isa_config())?;
            let trace = trace.expect("tracing is always on for the bench");
            let (out, m, _) = measured(out, trace.timings, trace.flops);
            Ok((out, m, Some(trace)))
        }
    }
}

impl Measurement {
    fn with<T: Element>(self, out: Tensor4<T>) -> (Tensor4<T>, Measurement, Option<IsaTrace>) {
        (out, self, None)
    }
}
