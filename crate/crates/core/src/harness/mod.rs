//! Synthetic workloads, experiment runs and the command-line front end.

mod cli;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    hstu_attention_reference, AttentionError, AttentionInputs, BiasConfig, BiasParams, QkvBatch,
};
use crate::comm::CollectiveStats;
use crate::engine::{
    build_shard_plan, flops_per_rank, plan_for_batches, redistribute, run_pipeline, BalanceMode,
    EngineError, FlopsReport, Protocol, Schedule,
};
use crate::jagged::{JaggedError, JaggedIntSeries, JaggedTensor};
use crate::scalar::{DType, Scalar};

pub use cli::run_cli;

/// Standard deviation of the bias-weight initializer.
pub const TS_WEIGHT_STDDEV: f64 = 0.02;

const MAX_TIMESTAMP_GAP: f64 = 1e6;
const TIMESTAMP_EPOCH: i64 = 1_600_000_000;

pub const MEMORY_MODEL: &str =
    "per-rank bytes = dtype_size * embed_dim * 6 * R + dtype_size * C^2, \
where R is the largest per-rank resident token count after redistribution (Q, K, V and output \
slabs plus the incoming K/V ring buffer) and C is the largest mini-chunk (one score block); \
parameters, optimizer state and the pre-redistribution input batch are not counted";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("budget of {budget} bytes cannot hold a length-1 sequence ({needed} bytes needed)")]
    BudgetTooSmall { budget: u64, needed: u64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Jagged(#[from] JaggedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    /// Inclusive on both ends; `min` may be 0.
    Uniform { min: usize, max: usize },
    /// `round(exp(N(mu, sigma)))`, clamped to `[1, max_length]`.
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cp_size: usize,
    /// Sequences per rank.
    pub batch_size: usize,
    pub lengths: LengthDist,
    pub max_length: usize,
    pub embed_dim: usize,
    pub num_buckets: usize,
    pub dtype: DType,
    pub protocol: Protocol,
    pub balance_mode: BalanceMode,
    pub seed: u64,
    /// Not part of the report: every schedule must produce the same one.
    #[serde(skip)]
    pub schedule: Schedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cp_size: 2,
            batch_size: 2,
            lengths: LengthDist::Uniform { min: 1, max: 128 },
            max_length: 128,
            embed_dim: 32,
            num_buckets: 32,
            dtype: DType::F64,
            protocol: Protocol::Alltoall,
            balance_mode: BalanceMode::BalancedMinichunk,
            seed: 0,
            schedule: Schedule::Sequential,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        for (name, v) in [
            ("cp_size", self.cp_size),
            ("batch_size", self.batch_size),
            ("max_length", self.max_length),
            ("embed_dim", self.embed_dim),
            ("num_buckets", self.num_buckets),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        match self.lengths {
            LengthDist::Uniform { min, max } => {
                if min > max {
                    return bad(format!("uniform lengths: min {min} > max {max}"));
                }
                if max > self.max_length {
                    return bad(format!(
                        "uniform lengths: max {max} exceeds max_length {}",
                        self.max_length
                    ));
                }
            }
            LengthDist::LogNormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return bad(format!("lognormal lengths: mu {mu}, sigma {sigma}"));
                }
            }
        }
        Ok(())
    }

    pub fn bias_config(&self) -> Result<BiasConfig, HarnessError> {
        Ok(BiasConfig::new(self.num_buckets)?)
    }

    pub fn bias_params<T: Scalar>(&self) -> Result<BiasParams<T>, HarnessError> {
        let cfg = self.bias_config()?;
        Ok(BiasParams::init_normal(
            &cfg,
            0.0,
            TS_WEIGHT_STDDEV,
            self.seed,
        )?)
    }
}

fn sample_length(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> usize {
    match cfg.lengths {
        LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        LengthDist::LogNormal { mu, sigma } => {
            let x: f64 = LogNormal::new(mu, sigma)
                .expect("validated parameters")
                .sample(rng);
            (x.round() as usize).clamp(1, cfg.max_length)
        }
    }
}

/// Rank `rank`'s local batch. Values are drawn in f64 and rounded to `T`,
/// so the f32 and f64 batches for one `(seed, rank)` agree up to rounding.
pub fn gen_synthetic_batch<T: Scalar>(
    cfg: &ExperimentConfig,
    rank: usize,
) -> Result<QkvBatch<T>, HarnessError> {
    cfg.validate()?;
    if rank >= cfg.cp_size {
        return Err(HarnessError::InvalidConfig(format!(
            "rank {rank} outside a group of {}",
            cfg.cp_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // stream 0 is left to the bias initializer
    rng.set_stream(rank as u64 + 1);

    let lengths: Vec<usize> = (0..cfg.batch_size)
        .map(|_| sample_length(cfg, &mut rng))
        .collect();
    let tokens: usize = lengths.iter().sum();
    let d = cfg.embed_dim;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<T> {
        (0..tokens * d)
            .map(|_| T::of(StandardNormal.sample(rng)))
            .collect()
    };
    let (q, k, v) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));

    let max_log_gap = MAX_TIMESTAMP_GAP.ln();
    let mut ts = Vec::with_capacity(tokens);
    for &len in &lengths {
        let mut t = TIMESTAMP_EPOCH + rng.random_range(0..MAX_TIMESTAMP_GAP as i64);
        for _ in 0..len {
            ts.push(t);
            // log-uniform over [1, 1e6] so many buckets see traffic
            let gap = (rng.random::<f64>() * max_log_gap).exp().round() as i64;
            t += gap.max(1);
        }
    }

    let mk = |data| JaggedTensor::from_flat(d, data, offsets(&lengths), cfg.max_length);
    let batch = QkvBatch::new(
        mk(q)?,
        mk(k)?,
        mk(v)?,
        JaggedIntSeries::new(ts, offsets(&lengths))?,
    )?;
    Ok(batch)
}

fn offsets(lengths: &[usize]) -> Vec<usize> {
    std::iter::once(0)
        .chain(lengths.iter().scan(0, |acc, &l| {
            *acc += l;
            Some(*acc)
        }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub total_tokens: usize,
    pub max_abs_error: f64,
    /// Largest per-row `max|err| / max|ref|`.
    pub max_rel_error: f64,
    /// Redistribution, ring and restore, in execution order.
    pub collectives: Vec<CollectiveStats>,
    pub flops: FlopsReport,
    /// Per-rank maximum over all collectives of this run.
    pub peak_resident_bytes: Vec<u64>,
    pub allgather_peak_bytes: u64,
    pub alltoall_peak_bytes: u64,
    /// `1 - alltoall_peak_bytes / allgather_peak_bytes`, 0 for an empty batch.
    pub memory_reduction_ratio: f64,
    pub resident_tokens_per_rank: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Compares `got` against an f64 reference with identical offsets.
pub fn compare_outputs<T: Scalar>(got: &JaggedTensor<T>, want: &JaggedTensor<f64>) -> ErrorSummary {
    assert_eq!(got.offsets(), want.offsets(), "outputs must share offsets");
    let d = want.embed_dim();
    let mut s = ErrorSummary {
        max_abs: 0.0,
        max_rel: 0.0,
    };
    for (g, w) in got
        .values()
        .as_slice()
        .chunks(d)
        .zip(want.values().as_slice().chunks(d))
    {
        let err = g
            .iter()
            .zip(w)
            .map(|(&a, &b)| (a.as_f64() - b).abs())
            .fold(0.0, f64::max);
        let scale = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
        s.max_abs = s.max_abs.max(err);
        s.max_rel = s.max_rel.max(err / scale.max(f64::MIN_POSITIVE));
    }
    s
}

/// Runs the pipeline in `T`, returning the report and per-rank outputs.
pub fn run_experiment_typed<T: Scalar>(
    cfg: &ExperimentConfig,
) -> Result<(ExperimentReport, Vec<JaggedTensor<T>>), HarnessError> {
    cfg.validate()?;
    let bias_cfg = cfg.bias_config()?;
    let batches_f64 = (0..cfg.cp_size)
        .map(|r| gen_synthetic_batch::<f64>(cfg, r))
        .collect::<Result<Vec<_>, _>>()?;
    let batches: Vec<QkvBatch<T>> = batches_f64.iter().map(QkvBatch::cast).collect();
    let params_f64 = cfg.bias_params::<f64>()?;
    let params: BiasParams<T> = params_f64.cast();

    let plan = plan_for_batches(&batches, cfg.cp_size, cfg.balance_mode)?;
    let out = run_pipeline(
        &batches,
        &plan,
        cfg.protocol,
        cfg.schedule,
        &params,
        &bias_cfg,
    )?;

    let mut errors = ErrorSummary {
        max_abs: 0.0,
        max_rel: 0.0,
    };
    for (batch, got) in batches_f64.iter().zip(&out.outputs) {
        let want = hstu_attention_reference(&AttentionInputs::new(batch, &params_f64, &bias_cfg)?)?;
        let e = compare_outputs(got, &want);
        errors.max_abs = errors.max_abs.max(e.max_abs);
        errors.max_rel = errors.max_rel.max(e.max_rel);
    }

    let peak_for = |protocol: Protocol| -> Result<u64, HarnessError> {
        if protocol == cfg.protocol {
            return Ok(out.redistribution.max_peak());
        }
        Ok(redistribute(protocol, &batches, &plan)?.1.max_peak())
    };
    let allgather_peak_bytes = peak_for(Protocol::AllgatherSplit)?;
    let alltoall_peak_bytes = peak_for(Protocol::Alltoall)?;
    let memory_reduction_ratio = if allgather_peak_bytes == 0 {
        0.0
    } else {
        1.0 - alltoall_peak_bytes as f64 / allgather_peak_bytes as f64
    };

    let peak_resident_bytes = (0..cfg.cp_size)
        .map(|r| {
            out.collectives()
                .iter()
                .map(|c| c.ranks[r].peak_resident_bytes)
                .max()
                .unwrap_or(0)
        })
        .collect();

    let report = ExperimentReport {
        config: cfg.clone(),
        total_tokens: plan.total_tokens(),
        max_abs_error: errors.max_abs,
        max_rel_error: errors.max_rel,
        collectives: out.collectives().into_iter().cloned().collect(),
        flops: flops_per_rank(&plan),
        peak_resident_bytes,
        allgather_peak_bytes,
        alltoall_peak_bytes,
        memory_reduction_ratio,
        resident_tokens_per_rank: out.resident_tokens.clone(),
    };
    Ok((report, out.outputs))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Ok(match cfg.dtype {
        DType::F32 => run_experiment_typed::<f32>(cfg)?.0,
        DType::F64 => run_experiment_typed::<f64>(cfg)?.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cp_size: usize,
    pub max_sequence_length: usize,
    pub resident_tokens_per_rank: usize,
    pub modeled_peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub memory_budget_bytes: u64,
    pub embed_dim: usize,
    pub dtype: DType,
    pub balance_mode: BalanceMode,
    pub memory_model: String,
    pub rows: Vec<SweepRow>,
}

/// Modeled per-rank peak for one sequence of `len` tokens, with the
/// resident token count that produced it.
pub fn modeled_peak_bytes(
    len: usize,
    cp_size: usize,
    embed_dim: usize,
    dtype: DType,
    balance_mode: BalanceMode,
) -> Result<(u64, usize), HarnessError> {
    let mut lengths = vec![Vec::new(); cp_size];
    lengths[0].push(len);
    let plan = build_shard_plan(&lengths, cp_size, balance_mode)?;
    let resident = (0..cp_size)
        .map(|r| plan.resident_tokens(r))
        .max()
        .unwrap_or(0);
    let chunk = (0..cp_size)
        .flat_map(|r| plan.rank_spans(r).iter().map(|s| s.len()))
        .max()
        .unwrap_or(0) as u64;
    let s = dtype.size_bytes() as u64;
    Ok((
        s * embed_dim as u64 * 6 * resident as u64 + s * chunk * chunk,
        resident,
    ))
}

/// Largest single-sequence length whose modeled per-rank peak fits the budget,
/// for each CP size.
pub fn sweep_max_tokens(
    memory_budget_bytes: u64,
    cp_sizes: &[usize],
    template: &ExperimentConfig,
) -> Result<SweepReport, HarnessError> {
    if template.embed_dim == 0 {
        return Err(HarnessError::InvalidConfig(
            "embed_dim must be positive".into(),
        ));
    }
    let model = |len, cp| {
        modeled_peak_bytes(
            len,
            cp,
            template.embed_dim,
            template.dtype,
            template.balance_mode,
        )
    };
    let mut rows = Vec::with_capacity(cp_sizes.len());
    for &cp in cp_sizes {
        if cp == 0 {
            return Err(HarnessError::InvalidConfig(
                "cp sizes must be positive".into(),
            ));
        }
        let needed = model(1, cp)?.0;
        if needed > memory_budget_bytes {
            return Err(HarnessError::BudgetTooSmall {
                budget: memory_budget_bytes,
                needed,
            });
        }
        // grow until the model overflows, then bisect (lo fits, hi does not)
        let mut lo = 1;
        let mut hi = 2;
        while model(hi, cp)?.0 <= memory_budget_bytes {
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if model(mid, cp)?.0 <= memory_budget_bytes {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (bytes, resident) = model(lo, cp)?;
        rows.push(SweepRow {
            cp_size: cp,
            max_sequence_length: lo,
            resident_tokens_per_rank: resident,
            modeled_peak_bytes: bytes,
        });
    }
    Ok(SweepReport {
        memory_budget_bytes,
        embed_dim: template.embed_dim,
        dtype: template.dtype,
        balance_mode: template.balance_mode,
        memory_model: MEMORY_MODEL.to_string(),
        rows,
    })
}
