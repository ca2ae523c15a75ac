//! Moving each rank's local batch onto the ranks that own its chunks.

use std::ops::Range;

use super::plan::{ChunkSpan, ShardPlan};
use super::EngineError;
use crate::attention::QkvBatch;
use crate::comm::{
    all_gather_jagged, all_to_all_jagged, ChunkHeader, CollectiveStats, GatherPart, JaggedMessage,
    RankHandle,
};
use crate::jagged::{rank_slab_rows, reorder_by_owner, JaggedTensor};
use crate::matrix::RowMatrix;
use crate::scalar::Scalar;

/// The Q/K/V/timestamp rows a rank holds after redistribution.
///
/// Rows are grouped by span, spans ordered by (sequence, chunk).
#[derive(Debug, Clone, PartialEq)]
pub struct RankContext<T> {
    pub rank: usize,
    pub spans: Vec<ChunkSpan>,
    pub q: RowMatrix<T>,
    pub k: RowMatrix<T>,
    pub v: RowMatrix<T>,
    pub ts: Vec<i64>,
}

impl<T: Scalar> RankContext<T> {
    pub fn tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.q.cols()
    }

    /// Row range of each span inside the slabs.
    pub fn span_rows(&self) -> Vec<Range<usize>> {
        span_rows(&self.spans)
    }

    fn from_packed(
        rank: usize,
        spans: Vec<ChunkSpan>,
        packed: RowMatrix<T>,
        ts: Vec<i64>,
        dim: usize,
    ) -> Self {
        let mut parts = packed.split_cols(&[dim, dim, dim]).into_iter();
        let (q, k, v) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        Self {
            rank,
            spans,
            q,
            k,
            v,
            ts,
        }
    }
}

pub(crate) fn span_rows(spans: &[ChunkSpan]) -> Vec<Range<usize>> {
    let mut at = 0;
    spans
        .iter()
        .map(|s| {
            let r = at..at + s.len();
            at += s.len();
            r
        })
        .collect()
}

fn check_batch<T: Scalar>(
    rank: usize,
    batch: &QkvBatch<T>,
    plan: &ShardPlan,
) -> Result<(), EngineError> {
    if batch.lengths() != plan.local_lengths(rank) {
        return Err(EngineError::PlanMismatch(format!(
            "rank {rank} batch lengths {:?} differ from plan {:?}",
            batch.lengths(),
            plan.local_lengths(rank)
        )));
    }
    Ok(())
}

fn check_batches<T: Scalar>(batches: &[QkvBatch<T>], plan: &ShardPlan) -> Result<(), EngineError> {
    if batches.len() != plan.cp_size() {
        return Err(EngineError::PlanMismatch(format!(
            "{} batches for a plan over {} ranks",
            batches.len(),
            plan.cp_size()
        )));
    }
    let dim = batches[0].embed_dim();
    for (rank, b) in batches.iter().enumerate() {
        check_batch(rank, b, plan)?;
        if b.embed_dim() != dim {
            return Err(EngineError::PlanMismatch(format!(
                "rank {rank} has embed_dim {}, rank 0 has {dim}",
                b.embed_dim()
            )));
        }
    }
    Ok(())
}

/// Q, K and V side by side, one row per token.
fn pack<T: Scalar>(batch: &QkvBatch<T>) -> RowMatrix<T> {
    RowMatrix::hcat(&[batch.q.values(), batch.k.values(), batch.v.values()])
        .expect("Q, K and V share rows")
}

fn gather_part<T: Scalar>(batch: &QkvBatch<T>) -> Result<GatherPart<T>, EngineError> {
    Ok(GatherPart {
        values: JaggedTensor::new(pack(batch), batch.offsets().to_vec(), batch.q.max_length())?,
        timestamps: Some(batch.ts.clone()),
    })
}

/// Keeps `rank`'s rows of a fully gathered batch.
fn slab_from_gathered<T: Scalar>(
    rank: usize,
    gathered: &GatherPart<T>,
    plan: &ShardPlan,
    dim: usize,
) -> Result<RankContext<T>, EngineError> {
    let full = &gathered.values;
    let (reordered, perm) = reorder_by_owner(
        full,
        plan.chunk_ranges(),
        plan.chunk_owners(),
        plan.cp_size(),
    )?;
    let rows = rank_slab_rows(&reordered, plan.num_sequences(), rank);
    let packed = RowMatrix::from_flat(
        3 * dim,
        reordered.values().row_block(rows.start, rows.end).to_vec(),
    )?;
    let all_ts = gathered
        .timestamps
        .as_ref()
        .expect("redistribution gathers timestamps")
        .values();
    let ts = perm.rows[rows].iter().map(|&src| all_ts[src]).collect();
    Ok(RankContext::from_packed(
        rank,
        plan.rank_spans(rank).to_vec(),
        packed,
        ts,
        dim,
    ))
}

/// After the gather each rank compacts its own rows in place and drops the
/// rest, so only the final residency changes.
fn split_stats(
    mut stats: CollectiveStats,
    plan: &ShardPlan,
    dim: usize,
    elem: usize,
) -> CollectiveStats {
    for r in 0..plan.cp_size() {
        stats.final_resident_bytes[r] = (plan.resident_tokens(r) * 3 * dim * elem) as u64;
    }
    stats.named("allgather_split")
}

pub fn redistribute_allgather_split<T: Scalar>(
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
) -> Result<(Vec<RankContext<T>>, CollectiveStats), EngineError> {
    check_batches(batches, plan)?;
    let dim = batches[0].embed_dim();
    let parts = batches
        .iter()
        .map(gather_part)
        .collect::<Result<Vec<_>, _>>()?;
    let (gathered, stats) = all_gather_jagged(plan.cp_size(), parts)?;
    let contexts = gathered
        .iter()
        .enumerate()
        .map(|(r, g)| slab_from_gathered(r, g, plan, dim))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        contexts,
        split_stats(stats, plan, dim, T::DTYPE.size_bytes()),
    ))
}

pub fn redistribute_allgather_split_rank<T: Scalar>(
    handle: &RankHandle<'_>,
    batch: &QkvBatch<T>,
    plan: &ShardPlan,
) -> Result<(RankContext<T>, CollectiveStats), EngineError> {
    let rank = handle.rank();
    check_batch(rank, batch, plan)?;
    let dim = batch.embed_dim();
    let (gathered, stats) = handle.all_gather_jagged(gather_part(batch)?)?;
    let ctx = slab_from_gathered(rank, &gathered, plan, dim)?;
    Ok((ctx, split_stats(stats, plan, dim, T::DTYPE.size_bytes())))
}

/// Slices a local batch into one message per owning rank.
fn build_sends<T: Scalar>(
    rank: usize,
    batch: &QkvBatch<T>,
    plan: &ShardPlan,
) -> Result<Vec<JaggedMessage<T>>, EngineError> {
    let cp = plan.cp_size();
    let dim = batch.embed_dim();
    let packed = pack(batch);
    let mut headers = vec![Vec::new(); cp];
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); cp];
    let mut ts: Vec<Vec<i64>> = vec![Vec::new(); cp];
    let first = plan.first_sequence(rank);
    for local in 0..batch.q.num_sequences() {
        let sequence = first + local;
        let base = batch.offsets()[local];
        let local_ts = batch.ts.sequence(local);
        for (chunk, r) in plan.chunk_ranges()[sequence].iter().enumerate() {
            if r.is_empty() {
                continue;
            }
            let dst = plan.chunk_owner(chunk);
            headers[dst].push(ChunkHeader {
                sequence,
                chunk,
                start: r.start,
                tokens: r.len(),
            });
            rows[dst].extend_from_slice(packed.row_block(base + r.start, base + r.end));
            ts[dst].extend_from_slice(&local_ts[r.clone()]);
        }
    }
    headers
        .into_iter()
        .zip(rows)
        .zip(ts)
        .map(|((h, data), t)| {
            let payload = RowMatrix::from_flat(3 * dim, data)?;
            JaggedMessage::new(h, payload, Some(t)).map_err(EngineError::PlanMismatch)
        })
        .collect()
}

fn context_from_messages<T: Scalar>(
    rank: usize,
    messages: Vec<JaggedMessage<T>>,
    plan: &ShardPlan,
    dim: usize,
) -> Result<RankContext<T>, EngineError> {
    let mut spans = Vec::new();
    let mut packed = RowMatrix::zeros(0, 3 * dim);
    let mut ts = Vec::new();
    for m in messages {
        let (header, payload, stamps) = m.into_parts();
        spans.extend(header.iter().map(|h| ChunkSpan {
            sequence: h.sequence,
            chunk: h.chunk,
            start: h.start,
            end: h.end(),
        }));
        packed.extend_rows(payload.as_slice());
        ts.extend(stamps.unwrap_or_default());
    }
    if spans != plan.rank_spans(rank) {
        return Err(EngineError::PlanMismatch(format!(
            "rank {rank} received chunks that differ from its plan"
        )));
    }
    Ok(RankContext::from_packed(rank, spans, packed, ts, dim))
}

pub fn redistribute_alltoall<T: Scalar>(
    batches: &[QkvBatch<T>],
    plan: &ShardPlan,
) -> Result<(Vec<RankContext<T>>, CollectiveStats), EngineError> {
    check_batches(batches, plan)?;
    let dim = batches[0].embed_dim();
    let sends = batches
        .iter()
        .enumerate()
        .map(|(r, b)| build_sends(r, b, plan))
        .collect::<Result<Vec<_>, _>>()?;
    let (received, stats) = all_to_all_jagged(plan.cp_size(), sends)?;
    let contexts = received
        .into_iter()
        .enumerate()
        .map(|(r, msgs)| context_from_messages(r, msgs, plan, dim))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((contexts, stats.named("alltoall")))
}

pub fn redistribute_alltoall_rank<T: Scalar>(
    handle: &RankHandle<'_>,
    batch: &QkvBatch<T>,
    plan: &ShardPlan,
) -> Result<(RankContext<T>, CollectiveStats), EngineError> {
    let rank = handle.rank();
    check_batch(rank, batch, plan)?;
    let dim = batch.embed_dim();
    let (received, stats) = handle.all_to_all_jagged(build_sends(rank, batch, plan)?)?;
    let ctx = context_from_messages(rank, received, plan, dim)?;
    Ok((ctx, stats.named("alltoall")))
}
