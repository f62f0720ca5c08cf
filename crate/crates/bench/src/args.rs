use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use isa_core::{IsaConfig, Precision, WorkloadKind, WorkloadSpec};

#[derive(Debug, Parser)]
#[command(name = "isa-bench", version, about = "Time and check in-context sparse attention on synthetic workloads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration `--repeats` times.
    Run(RunArgs),
    /// Run every point of a grid over S, alpha_s, alpha_ns and alpha_f.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Dense softmax attention.
    Full,
    /// Dense attention through the blockwise online softmax.
    Online,
    /// The Taylor kernel on every query against every key.
    Taylor,
    /// The full sparse pipeline.
    Isa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Iid,
    Clustered,
    Lowrank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "isa")]
    pub mode: Mode,
    /// Total sequence length; split evenly unless --src-len/--ctx-len say otherwise.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub src_len: Option<usize>,
    #[arg(long)]
    pub ctx_len: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,
    #[arg(long, default_value_t = 0.125)]
    pub alpha_s: f64,
    #[arg(long, default_value_t = 0.0625)]
    pub alpha_ns: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_f: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmups: usize,
    #[arg(long, value_enum, default_value = "single")]
    pub precision: PrecisionArg,
    /// Run heads one after another.
    #[arg(long)]
    pub deterministic: bool,
    /// Write the pipeline trace of the last repeat as JSON (isa mode).
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Save the generated Q, K, V before running.
    #[arg(long, value_name = "PATH")]
    pub dump: Option<PathBuf>,
    /// Read Q, K, V from a dumped workload instead of generating them.
    #[arg(long, value_name = "PATH")]
    pub load: Option<PathBuf>,
    /// Rotate Q and K with positions restarting at the context segment.
    #[arg(long)]
    pub rope: bool,
    #[arg(long, default_value_t = 10_000.0)]
    pub rope_base: f64,
    #[arg(long, value_enum, default_value = "clustered")]
    pub workload: Generator,
    /// Cluster count of the clustered generator; S/(4b) when absent.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Context attenuation in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub attenuation: f64,
    /// Sharpness from raw coarse scores instead of their softmax.
    #[arg(long)]
    pub raw_sharpness: bool,
    /// Coarse residual from raw scores instead of a scaled softmax.
    #[arg(long)]
    pub raw_residual: bool,
    /// Allow lengths that are not multiples of the block size.
    #[arg(long)]
    pub non_strict: bool,
    /// Skip the dense reference; error columns stay empty.
    #[arg(long)]
    pub no_error: bool,
    /// Fail with the numeric exit code if max relative error exceeds this.
    #[arg(long, value_name = "TOL")]
    pub assert_max_err: Option<f64>,
    /// Fail if the kernel MA ratio strays from the closed-form model by more
    /// than this relative amount (isa mode).
    #[arg(long, value_name = "TOL")]
    pub assert_flop_model: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub grid_seq_len: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha_s: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha_ns: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha_f: Vec<f64>,
    /// Median rows only, with the grid columns first.
    #[arg(long)]
    pub gnuplot: bool,
}

impl RunArgs {
    pub fn precision(&self) -> Precision {
        match self.precision {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }

    /// Source and context lengths from the three length flags.
    pub fn split(&self) -> Result<(usize, usize)> {
        match (self.seq_len, self.src_len, self.ctx_len) {
            (None, None, None) => Ok((1024, 1024)),
            (Some(s), None, None) => Ok((s / 2, s - s / 2)),
            (s, Some(a), None) => Ok((a, s.unwrap_or(2 * a).checked_sub(a).ok_or_else(|| too_short(a))?)),
            (s, None, Some(c)) => Ok((s.unwrap_or(2 * c).checked_sub(c).ok_or_else(|| too_short(c))?, c)),
            (s, Some(a), Some(c)) => {
                if s.is_some_and(|s| s != a + c) {
                    bail!("--seq-len {} differs from --src-len {a} + --ctx-len {c}", s.unwrap_or_default());
                }
                Ok((a, c))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            bail!("--repeats must be at least 1");
        }
        if self.trace.is_some() && self.mode != Mode::Isa {
            bail!("--trace needs --mode isa");
        }
        if self.assert_flop_model.is_some() && self.mode != Mode::Isa {
            bail!("--assert-flop-model needs --mode isa");
        }
        if self.load.is_some() && self.dump.is_some() {
            bail!("--load and --dump cannot be combined");
        }
        self.isa_config().validate()?;
        Ok(())
    }

    pub fn workload_spec(&self) -> Result<WorkloadSpec> {
        let (src_len, ctx_len) = self.split()?;
        let kind = match (&self.load, self.workload) {
            (Some(p), _) => WorkloadKind::Loaded(p.clone()),
            (None, Generator::Iid) => WorkloadKind::IidGaussian,
            (None, Generator::Clustered) => WorkloadKind::Clustered {
                n_clusters: self.clusters.unwrap_or(((src_len + ctx_len) / (4 * self.block_size.max(1))).max(1)),
                sigma: self.sigma,
            },
            (None, Generator::Lowrank) => WorkloadKind::LowRank { rank: self.rank, sigma: self.sigma },
        };
        Ok(WorkloadSpec {
            batch: self.batch,
            heads: self.heads,
            dim: self.dim,
            src_len,
            ctx_len,
            block_size: self.block_size,
            kind,
            context_attenuation: self.attenuation,
            seed: self.seed,
        })
    }

    pub fn isa_config(&self) -> IsaConfig {
        IsaConfig {
            alpha_s: self.alpha_s,
            alpha_ns: self.alpha_ns,
            alpha_f: self.alpha_f,
            gamma: self.gamma,
            block_size: self.block_size,
            scale: None,
            softmax_first: !self.raw_sharpness,
            residual_softmax: !self.raw_residual,
            deterministic: self.deterministic,
            strict: !self.non_strict,
            precision: self.precision(),
            trace: true,
        }
    }
}

fn too_short(part: usize) -> anyhow::Error {
    anyhow::anyhow!("--seq-len is shorter than the given segment length {part}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunArgs {
        let mut full = vec!["isa-bench", "run"];
        full.extend_from_slice(args);
        match Cli::parse_from(full).command {
            Command::Run(r) => r,
            Command::Sweep(_) => unreachable!(),
        }
    }

    #[test]
    fn length_flags() {
        assert_eq!(parse(&[]).split().unwrap(), (1024, 1024));
        assert_eq!(parse(&["--seq-len", "100"]).split().unwrap(), (50, 50));
        assert_eq!(parse(&["--seq-len", "100", "--src-len", "30"]).split().unwrap(), (30, 70));
        assert_eq!(parse(&["--ctx-len", "12"]).split().unwrap(), (12, 12));
        assert_eq!(parse(&["--src-len", "5", "--ctx-len", "7"]).split().unwrap(), (5, 7));
        assert!(parse(&["--seq-len", "10", "--src-len", "5", "--ctx-len", "7"]).split().is_err());
        assert!(parse(&["--seq-len", "4", "--src-len", "5"]).split().is_err());
    }

    #[test]
    fn defaults_follow_the_library() {
        let r = parse(&[]);
        let lib = IsaConfig::default();
        let cfg = r.isa_config();
        assert_eq!((cfg.alpha_s, cfg.alpha_ns, cfg.alpha_f, cfg.gamma), (lib.alpha_s, lib.alpha_ns, lib.alpha_f, lib.gamma));
        assert_eq!(cfg.block_size, lib.block_size);
        assert_eq!(r.workload_spec().unwrap().kind, WorkloadKind::Clustered { n_clusters: 8, sigma: 0.5 });
    }

    #[test]
    fn rejects_bad_combinations() {
        assert!(parse(&["--repeats", "0"]).validate().is_err());
        assert!(parse(&["--mode", "full", "--trace", "t.json"]).validate().is_err());
        assert!(parse(&["--alpha-ns", "0"]).validate().is_err());
    }
}
