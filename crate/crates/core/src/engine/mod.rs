//! End-to-end context-parallel HSTU attention over a simulated CP group.
//!
//! A run has three phases:
//!
//! 1. redistribution: each DP rank's local batch is moved onto the ranks that
//!    own its chunks, either by gathering everything and keeping a slice
//!    ([`Protocol::AllgatherSplit`]) or by sending each chunk straight to its
//!    owner ([`Protocol::Alltoall`]);
//! 2. ring attention: K/V chunks rotate `cp - 1` times while each rank
//!    accumulates partial outputs for its resident queries;
//! 3. restore: output rows travel back to the DP rank that owns the sequence.
//!
//! Every phase can run round-robin on one thread or with one thread per rank;
//! both produce bit-identical outputs and statistics.

mod flops;
mod plan;
mod redistribute;
mod restore;
mod ring;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionError, BiasConfig, BiasParams, QkvBatch};
use crate::comm::{CollectiveStats, CommError, RankGroup};
use crate::jagged::{JaggedError, JaggedTensor};
use crate::matrix::{RowMatrix, ShapeError};
use crate::scalar::Scalar;

pub use flops::{flops_per_rank, FlopsReport};
pub use plan::{build_shard_plan, BalanceMode, ChunkSpan, ShardPlan};
pub use redistribute::{
    redistribute_allgather_split, redistribute_allgather_split_rank, redistribute_alltoall,
    redistribute_alltoall_rank, RankContext,
};
pub use restore::{restore_outputs, restore_outputs_rank};
pub use ring::{ring_hstu_attention, ring_hstu_attention_rank};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("cp_size must be at least 1")]
    ZeroCpSize,
    #[error("plan does not match inputs: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Jagged(#[from] JaggedError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("rank {rank}: {source}")]
    Rank {
        rank: usize,
        #[source]
        source: Box<EngineError>,
    },
}

impl From<ShapeError> for EngineError {
    fn from(e: ShapeError) -> Self {
        EngineError::Jagged(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    AllgatherSplit,
    Alltoall,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allgather_split" | "allgather" => Ok(Self::AllgatherSplit),
            "alltoall" | "all_to_all" => Ok(Self::Alltoall),
            other => Err(format!(
                "unknown protocol '{other}' (expected allgather_split or alltoall)"
            )),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllgatherSplit => "allgather_split",
            Self::Alltoall => "alltoall",
        })
    }
}

/// How rank workers are driven.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// All ranks round-robin on the calling thread.
    #[default]
    Sequential,
    /// One OS thread per rank, synchronized only through collectives.
    Concurrent,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "concurrent" => Ok(Self::Concurrent),
            other => Err(format!(
                "unknown schedule '{other}' (expected sequential or concurrent)"
            )),
        }
    }
}

/// Group-level redistribution with the chosen protocol.
pub fn redistribute<T: Scalar>(
    protocol: Protocol,
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
) -> Result<(Vec<RankContext<T>>, CollectiveStats), EngineError> {
    match protocol {
        Protocol::AllgatherSplit => redistribute_allgather_split(batches, plan),
        Protocol::Alltoall => redistribute_alltoall(batches, plan),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput<T> {
    /// Attention output per DP rank, offsets identical to that rank's input.
    pub outputs: Vec<JaggedTensor<T>>,
    pub resident_tokens: Vec<usize>,
    pub redistribution: CollectiveStats,
    pub ring: CollectiveStats,
    pub restore: CollectiveStats,
}

impl<T> PipelineOutput<T> {
    pub fn collectives(&self) -> [&CollectiveStats; 3] {
        [&self.redistribution, &self.ring, &self.restore]
    }
}

/// Plan for a set of batches, keeping each rank's declared `max_length`.
pub fn plan_for_batches<T: Scalar>(
    batches: &[QkvBatch<T>],
    cp_size: usize,
    balance_mode: BalanceMode,
) -> Result<ShardPlan, EngineError> {
    let lengths: Vec<_> = batches.iter().map(QkvBatch::lengths).collect();
    build_shard_plan(&lengths, cp_size, balance_mode)?
        .with_max_lengths(batches.iter().map(|b| b.q.max_length()).collect())
}

pub fn run_pipeline<T: Scalar>(
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
    protocol: Protocol,
    schedule: Schedule,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<PipelineOutput<T>, EngineError> {
    if batches.len() != plan.cp_size() {
        return Err(EngineError::PlanMismatch(format!(
            "{} batches for a plan over {} ranks",
            batches.len(),
            plan.cp_size()
        )));
    }
    match schedule {
        Schedule::Sequential => run_sequential(batches, plan, protocol, params, cfg),
        Schedule::Concurrent => run_concurrent(batches, plan, protocol, params, cfg),
    }
}

fn run_sequential<T: Scalar>(
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
    protocol: Protocol,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<PipelineOutput<T>, EngineError> {
    let (contexts, redistribution) = redistribute(protocol, batches, plan)?;
    let resident_tokens = contexts.iter().map(RankContext::tokens).collect();
    let (slabs, ring) = ring_hstu_attention(&contexts, params, cfg)?;
    let (outputs, restore) = restore_outputs(&slabs, plan)?;
    Ok(PipelineOutput {
        outputs,
        resident_tokens,
        redistribution,
        ring,
        restore,
    })
}

struct RankResult<T> {
    output: JaggedTensor<T>,
    resident_tokens: usize,
    stats: [CollectiveStats; 3],
}

fn run_rank<T: Scalar>(
    group: &RankGroup,
    rank: usize,
    batch: &QkvBatch<T>,
    plan: &ShardPlan,
    protocol: Protocol,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<RankResult<T>, EngineError> {
    let handle = group.handle(rank)?;
    let (ctx, redistribution) = match protocol {
        Protocol::AllgatherSplit => redistribute_allgather_split_rank(&handle, batch, plan)?,
        Protocol::Alltoall => redistribute_alltoall_rank(&handle, batch, plan)?,
    };
    let (slab, ring): (RowMatrix<T>, _) = ring_hstu_attention_rank(&handle, &ctx, params, cfg)?;
    let (output, restore) = restore_outputs_rank(&handle, &slab, plan)?;
    Ok(RankResult {
        output,
        resident_tokens: ctx.tokens(),
        stats: [redistribution, ring, restore],
    })
}

fn run_concurrent<T: Scalar>(
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
    protocol: Protocol,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<PipelineOutput<T>, EngineError> {
    let group = RankGroup::new(plan.cp_size());
    let results: Vec<Result<RankResult<T>, EngineError>> = std::thread::scope(|s| {
        let workers: Vec<_> = batches
            .iter()
            .enumerate()
            .map(|(rank, batch)| {
                let group = &group;
                s.spawn(move || {
                    let r = run_rank(group, rank, batch, plan, protocol, params, cfg);
                    if let Err(e) = &r {
                        group.abort(format!("rank {rank} failed: {e}"));
                    }
                    r
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().expect("rank worker panicked"))
            .collect()
    });

    // Report the root cause rather than a peer's "aborted" echo of it.
    if let Some((rank, e)) = results
        .iter()
        .enumerate()
        .filter_map(|(r, res)| res.as_ref().err().map(|e| (r, e)))
        .min_by_key(|(_, e)| matches!(e, EngineError::Comm(CommError::Aborted(_))))
    {
        return Err(EngineError::Rank {
            rank,
            source: Box::new(e.clone()),
        });
    }

    let mut outputs = Vec::with_capacity(results.len());
    let mut resident_tokens = Vec::with_capacity(results.len());
    let mut stats = None;
    for r in results {
        let r = r.expect("errors handled above");
        outputs.push(r.output);
        resident_tokens.push(r.resident_tokens);
        // every rank receives the same group-wide record
        stats.get_or_insert(r.stats);
    }
    let [redistribution, ring, restore] = stats.expect("at least one rank");
    Ok(PipelineOutput {
        outputs,
        resident_tokens,
        redistribution,
        ring,
        restore,
    })
}
