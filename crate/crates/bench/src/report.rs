use std::io::Write;

use anyhow::Result;
use isa_core::analysis::RelError;
use isa_core::{FlopCount, IclLayout, StageTimings};

use crate::args::{Mode, RunArgs};
use crate::run::Measurement;

pub const SCHEMA_VERSION: &str = "1";

pub const COLUMNS: [&str; 23] = [
    "schema_version",
    "mode",
    "S",
    "L_src",
    "L_ctx",
    "b",
    "alpha_s",
    "alpha_ns",
    "alpha_f",
    "gamma",
    "seed",
    "repeat",
    "t_total_us",
    "t_coarse_us",
    "t_select_us",
    "t_split_us",
    "t_kernel_us",
    "t_reconstruct_us",
    "mas_exact",
    "mas_taylor",
    "mas_dense_equiv",
    "max_rel_err",
    "mean_rel_err",
];

/// Grid columns, moved to the front in gnuplot order.
const GRID_COLUMNS: [&str; 4] = ["S", "alpha_s", "alpha_ns", "alpha_f"];

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub mode: Mode,
    pub icl: (usize, usize),
    pub b: usize,
    pub alpha_s: f64,
    pub alpha_ns: f64,
    pub alpha_f: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Params {
    pub fn from_args(args: &RunArgs, icl: &IclLayout) -> Self {
        Params {
            mode: args.mode,
            icl: (icl.src_len, icl.ctx_len),
            b: args.block_size,
            alpha_s: args.alpha_s,
            alpha_ns: args.alpha_ns,
            alpha_f: args.alpha_f,
            gamma: args.gamma,
            seed: args.seed,
        }
    }

    /// Parameters of a cell that failed before its workload existed.
    pub fn requested(args: &RunArgs) -> Self {
        let (src, ctx) = args.split().unwrap_or((0, 0));
        Self::from_args(args, &IclLayout { src_len: src, ctx_len: ctx })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Repeat {
    Index(usize),
    Median,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub params: Params,
    pub repeat: Repeat,
    pub m: Option<Measurement>,
}

fn median_u64(mut x: Vec<u64>) -> u64 {
    x.sort_unstable();
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        (x[n / 2 - 1] + x[n / 2]) / 2
    }
}

fn median_f64(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

impl Row {
    /// Summary row: per-column medians of the repeat rows. Counts come from
    /// the first repeat since they do not vary.
    pub fn median(params: &Params, rows: &[Row]) -> Row {
        let ms: Vec<Measurement> = rows.iter().filter_map(|r| r.m).collect();
        if ms.is_empty() {
            return Row { params: params.clone(), repeat: Repeat::Median, m: None };
        }
        let t = |f: fn(&StageTimings) -> u64| median_u64(ms.iter().map(|m| f(&m.timings)).collect());
        let timings = StageTimings {
            coarse_us: t(|s| s.coarse_us),
            select_us: t(|s| s.select_us),
            split_us: t(|s| s.split_us),
            kernel_us: t(|s| s.kernel_us),
            reconstruct_us: t(|s| s.reconstruct_us),
            total_us: t(|s| s.total_us),
        };
        let errs: Vec<RelError> = ms.iter().filter_map(|m| m.err).collect();
        let err = (!errs.is_empty()).then(|| RelError {
            max: median_f64(errs.iter().map(|e| e.max).collect()),
            mean: median_f64(errs.iter().map(|e| e.mean).collect()),
        });
        Row { params: params.clone(), repeat: Repeat::Median, m: Some(Measurement { timings, flops: ms[0].flops, err }) }
    }

    fn fields(&self) -> Vec<String> {
        let p = &self.params;
        let mode = match p.mode {
            Mode::Full => "full",
            Mode::Online => "online",
            Mode::Taylor => "taylor",
            Mode::Isa => "isa",
        };
        let repeat = match self.repeat {
            Repeat::Index(i) => i.to_string(),
            Repeat::Median => "median".into(),
            Repeat::Failed => "failed".into(),
        };
        let mut f = vec![
            SCHEMA_VERSION.to_string(),
            mode.to_string(),
            (p.icl.0 + p.icl.1).to_string(),
            p.icl.0.to_string(),
            p.icl.1.to_string(),
            p.b.to_string(),
            p.alpha_s.to_string(),
            p.alpha_ns.to_string(),
            p.alpha_f.to_string(),
            p.gamma.to_string(),
            p.seed.to_string(),
            repeat,
        ];
        match &self.m {
            Some(m) => {
                let t = &m.timings;
                let FlopCount { exact_mas, taylor_mas, dense_equivalent_mas, .. } = m.flops;
                for x in [t.total_us, t.coarse_us, t.select_us, t.split_us, t.kernel_us, t.reconstruct_us] {
                    f.push(x.to_string());
                }
                for x in [exact_mas, taylor_mas, dense_equivalent_mas] {
                    f.push(x.to_string());
                }
                match m.err {
                    Some(e) => f.extend([format!("{:e}", e.max), format!("{:e}", e.mean)]),
                    None => f.extend([String::new(), String::new()]),
                }
            }
            None => f.resize(COLUMNS.len(), String::new()),
        }
        f
    }
}

/// Column order: the fixed schema, or the grid columns first.
fn order(gnuplot: bool) -> Vec<usize> {
    let all: Vec<usize> = (0..COLUMNS.len()).collect();
    if !gnuplot {
        return all;
    }
    let pos = |name: &str| COLUMNS.iter().position(|c| *c == name).expect("grid column exists");
    let front: Vec<usize> = GRID_COLUMNS.iter().map(|c| pos(c)).collect();
    front.iter().copied().chain(all.into_iter().filter(|i| !front.contains(i))).collect()
}

/// Writes the schema comment, the header and `rows`.
pub fn write_csv<W: Write>(mut w: W, rows: &[Row], gnuplot: bool) -> Result<()> {
    writeln!(w, "# isa-bench csv schema {SCHEMA_VERSION}")?;
    let idx = order(gnuplot);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(idx.iter().map(|&i| COLUMNS[i]))?;
    for row in rows {
        let f = row.fields();
        out.write_record(idx.iter().map(|&i| f[i].as_str()))?;
    }
    out.flush()?;
    Ok(())
}
