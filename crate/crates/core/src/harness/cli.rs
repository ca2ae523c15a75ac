use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::{
    run_experiment, run_experiment_typed, sweep_max_tokens, ExperimentConfig, ExperimentReport,
    HarnessError, LengthDist, SweepReport,
};
use crate::engine::{BalanceMode, Protocol, Schedule};
use crate::jagged::JaggedTensor;
use crate::scalar::{DType, Scalar};

const F64_ABS_TOL: f64 = 1e-10;
const F32_REL_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "jagged-cp",
    version,
    about = "Context-parallel HSTU attention over jagged batches on a simulated rank group"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check CP outputs against the single-device reference over a config grid.
    Verify(VerifyArgs),
    /// Run one configuration and emit its report.
    Bench(BenchArgs),
    /// Largest sequence length per CP size under a modeled memory budget.
    Sweep(SweepArgs),
    /// Write synthetic per-rank batches as JSON fixtures.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Output {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dist {
    Uniform,
    Lognormal,
}

/// Batch shape flags shared by every subcommand that generates data.
#[derive(Args, Debug, Clone)]
struct ShapeArgs {
    /// Sequences per rank.
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = Dist::Uniform)]
    length_dist: Dist,
    /// Lower bound for uniform lengths.
    #[arg(long, default_value_t = 1)]
    min_length: usize,
    /// Upper bound for every sequence, and for uniform lengths.
    #[arg(long, default_value_t = 128)]
    max_length: usize,
    /// Log-space mean for lognormal lengths.
    #[arg(long, default_value_t = 3.5)]
    mu: f64,
    /// Log-space standard deviation for lognormal lengths.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    num_buckets: usize,
    /// Run ranks round-robin on one thread or one thread per rank.
    #[arg(long, default_value = "sequential")]
    schedule: Schedule,
}

impl ShapeArgs {
    fn config(
        &self,
        cp_size: usize,
        protocol: Protocol,
        balance_mode: BalanceMode,
        dtype: DType,
        seed: u64,
    ) -> ExperimentConfig {
        let lengths = match self.length_dist {
            Dist::Uniform => LengthDist::Uniform {
                min: self.min_length,
                max: self.max_length,
            },
            Dist::Lognormal => LengthDist::LogNormal {
                mu: self.mu,
                sigma: self.sigma,
            },
        };
        ExperimentConfig {
            cp_size,
            batch_size: self.batch_size,
            lengths,
            max_length: self.max_length,
            embed_dim: self.embed_dim,
            num_buckets: self.num_buckets,
            dtype,
            protocol,
            balance_mode,
            seed,
            schedule: self.schedule,
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// CP sizes to cover.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    cp: Vec<usize>,
    /// Restrict to one protocol (default: both).
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Restrict to one balance mode (default: both).
    #[arg(long)]
    balance_mode: Option<BalanceMode>,
    /// Restrict to one dtype (default: both).
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    cp: usize,
    #[arg(long, default_value = "alltoall")]
    protocol: Protocol,
    #[arg(long, default_value = "balanced")]
    balance_mode: BalanceMode,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Output::Json)]
    output: Output,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Per-rank memory budget in bytes.
    #[arg(long)]
    budget: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    cp: Vec<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long, default_value = "balanced")]
    balance_mode: BalanceMode,
    #[arg(long, value_enum, default_value_t = Output::Csv)]
    output: Output,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    cp: usize,
    #[arg(long, default_value = "f64")]
    dtype: DType,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `config.json` and `rank<r>_{q,k,v,ts}.json`.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0} of {1} configurations failed")]
    VerifyFailed(usize, usize),
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Verify(a) => verify(&a),
        Command::Bench(a) => bench(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Gen(a) => gen(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Harness(HarnessError::InvalidConfig(_))
                | CliError::Harness(HarnessError::BudgetTooSmall { .. }) => 2,
                _ => 1,
            }
        }
    }
}

fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Fixed CSV layout for `bench`; the JSON report carries the full detail.
#[derive(Serialize)]
struct BenchRow {
    cp_size: usize,
    batch_size: usize,
    dtype: DType,
    protocol: Protocol,
    balance_mode: BalanceMode,
    seed: u64,
    total_tokens: usize,
    max_abs_error: f64,
    max_rel_error: f64,
    flops_max_over_mean: f64,
    allgather_peak_bytes: u64,
    alltoall_peak_bytes: u64,
    memory_reduction_ratio: f64,
    max_peak_resident_bytes: u64,
    redistribution_max_bytes_received: u64,
}

impl From<&ExperimentReport> for BenchRow {
    fn from(r: &ExperimentReport) -> Self {
        Self {
            cp_size: r.config.cp_size,
            batch_size: r.config.batch_size,
            dtype: r.config.dtype,
            protocol: r.config.protocol,
            balance_mode: r.config.balance_mode,
            seed: r.config.seed,
            total_tokens: r.total_tokens,
            max_abs_error: r.max_abs_error,
            max_rel_error: r.max_rel_error,
            flops_max_over_mean: r.flops.max_over_mean,
            allgather_peak_bytes: r.allgather_peak_bytes,
            alltoall_peak_bytes: r.alltoall_peak_bytes,
            memory_reduction_ratio: r.memory_reduction_ratio,
            max_peak_resident_bytes: r.peak_resident_bytes.iter().copied().max().unwrap_or(0),
            redistribution_max_bytes_received: r.collectives[0]
                .ranks
                .iter()
                .map(|c| c.bytes_received)
                .max()
                .unwrap_or(0),
        }
    }
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let cfg = a
        .shape
        .config(a.cp, a.protocol, a.balance_mode, a.dtype, a.seed);
    let report = run_experiment(&cfg)?;
    let bytes = match a.output {
        Output::Json => to_json(&report)?,
        Output::Csv => csv_bytes([BenchRow::from(&report)])?,
    };
    emit(&a.out, &bytes)
}

fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let template = ExperimentConfig {
        embed_dim: a.embed_dim,
        dtype: a.dtype,
        balance_mode: a.balance_mode,
        seed: a.seed,
        ..Default::default()
    };
    let report: SweepReport = sweep_max_tokens(a.budget, &a.cp, &template)?;
    let bytes = match a.output {
        Output::Json => to_json(&report)?,
        Output::Csv => csv_bytes(&report.rows)?,
    };
    emit(&a.out, &bytes)
}

fn gen(a: &GenArgs) -> Result<(), CliError> {
    let cfg = a.shape.config(
        a.cp,
        Protocol::Alltoall,
        BalanceMode::BalancedMinichunk,
        a.dtype,
        a.seed,
    );
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("config.json"), to_json(&cfg)?)?;
    match a.dtype {
        DType::F32 => write_fixtures::<f32>(&cfg, &a.out_dir),
        DType::F64 => write_fixtures::<f64>(&cfg, &a.out_dir),
    }
}

fn write_fixtures<T: Scalar>(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    for r in 0..cfg.cp_size {
        let b = super::gen_synthetic_batch::<T>(cfg, r)?;
        for (name, t) in [("q", &b.q), ("k", &b.k), ("v", &b.v)] {
            fs::write(dir.join(format!("rank{r}_{name}.json")), t.to_json())?;
        }
        fs::write(dir.join(format!("rank{r}_ts.json")), to_json(&b.ts)?)?;
    }
    Ok(())
}

/// Outcome of one verify grid point, run under both schedules.
fn verify_one<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<String>, HarnessError> {
    let mut problems = Vec::new();
    let seq_cfg = ExperimentConfig {
        schedule: Schedule::Sequential,
        ..cfg.clone()
    };
    let con_cfg = ExperimentConfig {
        schedule: Schedule::Concurrent,
        ..cfg.clone()
    };
    let (seq, seq_out): (_, Vec<JaggedTensor<T>>) = run_experiment_typed(&seq_cfg)?;
    let (con, con_out) = run_experiment_typed::<T>(&con_cfg)?;
    let same_report = serde_json::to_string(&seq).ok() == serde_json::to_string(&con).ok();
    if seq_out != con_out || !same_report {
        problems.push("sequential and concurrent schedules disagree".to_string());
    }
    match T::DTYPE {
        DType::F64 if seq.max_abs_error > F64_ABS_TOL => problems.push(format!(
            "max_abs_error {:e} > {F64_ABS_TOL:e}",
            seq.max_abs_error
        )),
        DType::F32 if seq.max_rel_error > F32_REL_TOL => problems.push(format!(
            "max_rel_error {:e} > {F32_REL_TOL:e}",
            seq.max_rel_error
        )),
        _ => {}
    }
    if seq.alltoall_peak_bytes > seq.allgather_peak_bytes {
        problems.push(format!(
            "alltoall peak {} exceeds allgather peak {}",
            seq.alltoall_peak_bytes, seq.allgather_peak_bytes
        ));
    }
    Ok(problems)
}

fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let protocols = a
        .protocol
        .map_or(vec![Protocol::AllgatherSplit, Protocol::Alltoall], |p| {
            vec![p]
        });
    let modes = a.balance_mode.map_or(
        vec![BalanceMode::NaiveContiguous, BalanceMode::BalancedMinichunk],
        |m| vec![m],
    );
    let dtypes = a.dtype.map_or(vec![DType::F64, DType::F32], |d| vec![d]);

    let mut total = 0;
    let mut failed = 0;
    for &cp in &a.cp {
        for &protocol in &protocols {
            for &mode in &modes {
                for &dtype in &dtypes {
                    let cfg = a.shape.config(cp, protocol, mode, dtype, a.seed);
                    let label = format!("cp={cp} protocol={protocol} mode={mode} dtype={dtype}");
                    let outcome = match dtype {
                        DType::F32 => verify_one::<f32>(&cfg),
                        DType::F64 => verify_one::<f64>(&cfg),
                    };
                    total += 1;
                    match outcome {
                        Ok(p) if p.is_empty() => println!("ok   {label}"),
                        Ok(p) => {
                            failed += 1;
                            println!("FAIL {label}: {}", p.join("; "));
                        }
                        Err(HarnessError::InvalidConfig(m)) => {
                            return Err(HarnessError::InvalidConfig(m).into())
                        }
                        Err(e) => {
                            failed += 1;
                            println!("FAIL {label}: {e}");
                        }
                    }
                }
            }
        }
    }
    println!("{} of {total} configurations passed", total - failed);
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed, total));
    }
    Ok(())
}
