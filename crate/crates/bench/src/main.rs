mod args;
mod report;
mod run;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use isa_core::IsaError;

use args::{Cli, Command, RunArgs, SweepArgs};
use report::{write_csv, Params, Repeat, Row};
use run::{run_cell, Numeric};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<IsaError>() {
            return match e {
                IsaError::Io(_) | IsaError::Format { .. } | IsaError::Validation(_) => EXIT_IO,
                IsaError::Input(_) | IsaError::DegenerateRow { .. } => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            };
        }
        if cause.is::<Numeric>() {
            return EXIT_NUMERIC;
        }
        if cause.is::<io::Error>() || cause.is::<csv::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Sweep(args) => sweep(&args),
    }
}

fn emit(out: Option<&Path>, rows: &[Row], gnuplot: bool) -> Result<()> {
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(BufWriter::new(file), rows, gnuplot).with_context(|| format!("writing {}", path.display()))
        }
        None => write_csv(io::stdout().lock(), rows, gnuplot),
    }
}

fn run(args: &RunArgs) -> Result<()> {
    let cell = run_cell(args)?;
    emit(args.out.as_deref(), &cell.rows, false)?;
    if let (Some(path), Some(trace)) = (&args.trace, &cell.trace) {
        let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(trace.to_json().as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    }
    if !cell.problems.is_empty() {
        return Err(Numeric(cell.problems).into());
    }
    Ok(())
}

/// Every grid point as run arguments; an empty grid axis keeps the base value.
fn cells(sweep: &SweepArgs) -> Vec<RunArgs> {
    fn axis<T: Copy>(grid: &[T]) -> Vec<Option<T>> {
        if grid.is_empty() {
            vec![None]
        } else {
            grid.iter().map(|&x| Some(x)).collect()
        }
    }
    let mut out = Vec::new();
    for s in axis(&sweep.grid_seq_len) {
        for a_s in axis(&sweep.grid_alpha_s) {
            for a_ns in axis(&sweep.grid_alpha_ns) {
                for a_f in axis(&sweep.grid_alpha_f) {
                    let mut a = sweep.base.clone();
                    if let Some(s) = s {
                        (a.seq_len, a.src_len, a.ctx_len) = (Some(s), None, None);
                    }
                    a.alpha_s = a_s.unwrap_or(a.alpha_s);
                    a.alpha_ns = a_ns.unwrap_or(a.alpha_ns);
                    a.alpha_f = a_f.unwrap_or(a.alpha_f);
                    out.push(a);
                }
            }
        }
    }
    out
}

fn sweep(sweep: &SweepArgs) -> Result<()> {
    let base = &sweep.base;
    if base.trace.is_some() || base.dump.is_some() {
        bail!("--trace and --dump apply to single runs only");
    }
    let mut rows = Vec::new();
    let mut first_err: Option<anyhow::Error> = None;
    let mut problems = Vec::new();
    for args in cells(sweep) {
        let label = format!("S={:?} alpha_s={} alpha_ns={} alpha_f={}", args.split().ok(), args.alpha_s, args.alpha_ns, args.alpha_f);
        match run_cell(&args) {
            Ok(cell) => {
                problems.extend(cell.problems.into_iter().map(|p| format!("{label}: {p}")));
                rows.extend(cell.rows);
            }
            Err(err) => {
                eprintln!("cell {label} failed: {err:#}");
                rows.push(Row { params: Params::requested(&args), repeat: Repeat::Failed, m: None });
                first_err.get_or_insert(err);
            }
        }
    }
    if sweep.gnuplot {
        rows.retain(|r| r.repeat == Repeat::Median);
    }
    emit(base.out.as_deref(), &rows, sweep.gnuplot)?;
    match first_err {
        Some(err) => Err(err.context("at least one sweep cell failed")),
        None if !problems.is_empty() => Err(Numeric(problems).into()),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let cli = Cli::parse_from(["isa-bench", "sweep", "--grid-seq-len", "64,128", "--grid-alpha-ns", "1,0.5,0.25"]);
        let Command::Sweep(s) = cli.command else { unreachable!() };
        let c = cells(&s);
        assert_eq!(c.len(), 6);
        assert_eq!(c[5].seq_len, Some(128));
        assert_eq!(c[5].alpha_ns, 0.25);
        assert_eq!(c[0].alpha_s, 0.125);
    }

    #[test]
    fn exit_codes_follow_the_error_chain() {
        let io = anyhow::Error::from(io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&IsaError::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&Numeric(vec![]).into()), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("bad flag")), EXIT_CONFIG);
    }
}
