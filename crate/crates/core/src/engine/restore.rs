//! Returning sharded outputs to the DP rank that owns each sequence.

use super::plan::ShardPlan;
use super::redistribute::span_rows;
use super::EngineError;
use crate::comm::{all_to_all_jagged, ChunkHeader, CollectiveStats, JaggedMessage, RankHandle};
use crate::jagged::{inverse_reorder, JaggedTensor, RowPermutation};
use crate::matrix::RowMatrix;
use crate::scalar::Scalar;

fn build_sends<T: Scalar>(
    rank: usize,
    slab: &RowMatrix<T>,
    plan: &ShardPlan,
) -> Result<Vec<JaggedMessage<T>>, EngineError> {
    if slab.rows() != plan.resident_tokens(rank) {
        return Err(EngineError::PlanMismatch(format!(
            "rank {rank} output slab has {} rows, plan assigns {}",
            slab.rows(),
            plan.resident_tokens(rank)
        )));
    }
    let cp = plan.cp_size();
    let dim = slab.cols();
    let spans = plan.rank_spans(rank);
    let mut headers = vec![Vec::new(); cp];
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); cp];
    for (span, r) in spans.iter().zip(span_rows(spans)) {
        let dst = plan.origin_rank(span.sequence);
        headers[dst].push(ChunkHeader {
            sequence: span.sequence,
            chunk: span.chunk,
            start: span.start,
            tokens: span.len(),
        });
        rows[dst].extend_from_slice(slab.row_block(r.start, r.end));
    }
    headers
        .into_iter()
        .zip(rows)
        .map(|(h, data)| {
            JaggedMessage::new(h, RowMatrix::from_flat(dim, data)?, None)
                .map_err(EngineError::PlanMismatch)
        })
        .collect()
}

/// Places received rows back into original order via the inverse reorder.
fn assemble<T: Scalar>(
    rank: usize,
    messages: Vec<JaggedMessage<T>>,
    plan: &ShardPlan,
    dim: usize,
) -> Result<JaggedTensor<T>, EngineError> {
    let lengths = plan.local_lengths(rank);
    let mut offsets = vec![0];
    for &l in lengths {
        offsets.push(offsets.last().unwrap() + l);
    }
    let first = plan.first_sequence(rank);
    let mut arrival = RowMatrix::zeros(0, dim);
    let mut targets = Vec::new();
    for m in messages {
        for h in m.header() {
            if plan.origin_rank(h.sequence) != rank {
                return Err(EngineError::PlanMismatch(format!(
                    "rank {rank} received rows of sequence {} it does not own",
                    h.sequence
                )));
            }
            let base = offsets[h.sequence - first];
            targets.extend((h.start..h.end()).map(|p| base + p));
        }
        arrival.extend_rows(m.payload().as_slice());
    }
    let n = arrival.rows();
    let arrived = JaggedTensor::new(arrival, vec![0, n], n)?;
    let perm = RowPermutation {
        rows: targets,
        source_offsets: offsets.clone(),
    };
    let restored = inverse_reorder(&arrived, &perm)?;
    Ok(JaggedTensor::new(
        restored.into_values(),
        offsets,
        plan.max_length(rank),
    )?)
}

pub fn restore_outputs<T: Scalar>(
    slabs: &[RowMatrix<T>],
    plan: &ShardPlan,
) -> Result<(Vec<JaggedTensor<T>>, CollectiveStats), EngineError> {
    if slabs.len() != plan.cp_size() {
        return Err(EngineError::PlanMismatch(format!(
            "{} slabs for {} ranks",
            slabs.len(),
            plan.cp_size()
        )));
    }
    let dim = slabs[0].cols();
    let sends = slabs
        .iter()
        .enumerate()
        .map(|(r, s)| build_sends(r, s, plan))
        .collect::<Result<Vec<_>, _>>()?;
    let (received, stats) = all_to_all_jagged(plan.cp_size(), sends)?;
    let outputs = received
        .into_iter()
        .enumerate()
        .map(|(r, msgs)| assemble(r, msgs, plan, dim))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((outputs, stats.named("restore")))
}

pub fn restore_outputs_rank<T: Scalar>(
    handle: &RankHandle<'_>,
    slab: &RowMatrix<T>,
    plan: &ShardPlan,
) -> Result<(JaggedTensor<T>, CollectiveStats), EngineError> {
    let rank = handle.rank();
    let (received, stats) = handle.all_to_all_jagged(build_sends(rank, slab, plan)?)?;
    let out = assemble(rank, received, plan, slab.cols())?;
    Ok((out, stats.named("restore")))
}
