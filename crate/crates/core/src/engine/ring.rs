//! Ring schedule: K/V/timestamp chunks rotate, queries stay put.

use std::collections::BTreeMap;
use std::ops::Range;

use super::redistribute::{span_rows, RankContext};
use super::EngineError;
use crate::attention::{blockwise_partial, BiasConfig, BiasParams, KeyValueBlock, QueryBlock};
use crate::comm::{ring_send_recv, ChunkHeader, CollectiveStats, JaggedMessage, RankHandle};
use crate::matrix::RowMatrix;
use crate::scalar::Scalar;

/// The K|V payload a rank starts the ring with.
fn kv_message<T: Scalar>(ctx: &RankContext<T>) -> JaggedMessage<T> {
    let header = ctx
        .spans
        .iter()
        .map(|s| ChunkHeader {
            sequence: s.sequence,
            chunk: s.chunk,
            start: s.start,
            tokens: s.len(),
        })
        .collect();
    let payload = RowMatrix::hcat(&[&ctx.k, &ctx.v]).expect("K and V share rows");
    JaggedMessage::new(header, payload, Some(ctx.ts.clone())).expect("spans describe the slabs")
}

/// Per-rank accumulation state.
///
/// Partials are buffered per query span and reduced in ascending key-chunk
/// order once every chunk has visited, so the result does not depend on the
/// order in which chunks arrive.
struct RingWorker<'a, T> {
    ctx: &'a RankContext<T>,
    rows: Vec<Range<usize>>,
    by_sequence: BTreeMap<usize, Vec<usize>>,
    partials: Vec<Vec<(usize, RowMatrix<T>)>>,
    params: &'a BiasParams<T>,
    cfg: &'a BiasConfig,
}

impl<'a, T: Scalar> RingWorker<'a, T> {
    fn new(ctx: &'a RankContext<T>, params: &'a BiasParams<T>, cfg: &'a BiasConfig) -> Self {
        let mut by_sequence: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in ctx.spans.iter().enumerate() {
            by_sequence.entry(s.sequence).or_default().push(i);
        }
        Self {
            ctx,
            rows: span_rows(&ctx.spans),
            by_sequence,
            partials: vec![Vec::new(); ctx.spans.len()],
            params,
            cfg,
        }
    }

    fn compute(&mut self, visiting: &JaggedMessage<T>) -> Result<(), EngineError> {
        let dim = self.ctx.embed_dim();
        let mut kv = visiting.payload().split_cols(&[dim, dim]).into_iter();
        let (keys, values) = (kv.next().unwrap(), kv.next().unwrap());
        let stamps = visiting.timestamps().unwrap_or_default();
        let mut at = 0;
        for h in visiting.header() {
            let k_rows = at..at + h.tokens;
            at += h.tokens;
            let Some(spans) = self.by_sequence.get(&h.sequence) else {
                continue;
            };
            let block = KeyValueBlock {
                keys: keys.row_block(k_rows.start, k_rows.end),
                values: values.row_block(k_rows.start, k_rows.end),
                timestamps: &stamps[k_rows.clone()],
                sequence: h.sequence,
                start: h.start,
            };
            for &i in spans {
                let span = &self.ctx.spans[i];
                // entirely in the future of this query span
                if h.start >= span.end {
                    continue;
                }
                let q_rows = self.rows[i].clone();
                let query = QueryBlock {
                    rows: self.ctx.q.row_block(q_rows.start, q_rows.end),
                    timestamps: &self.ctx.ts[q_rows],
                    sequence: span.sequence,
                    start: span.start,
                };
                let partial = blockwise_partial(&query, &block, dim, self.params, self.cfg)?;
                self.partials[i].push((h.chunk, partial));
            }
        }
        Ok(())
    }

    fn finish(self) -> RowMatrix<T> {
        let dim = self.ctx.embed_dim();
        let mut out = RowMatrix::zeros(self.ctx.tokens(), dim);
        for (mut parts, rows) in self.partials.into_iter().zip(self.rows) {
            parts.sort_by_key(|(chunk, _)| *chunk);
            let dst = &mut out.as_mut_slice()[rows.start * dim..rows.end * dim];
            for (_, p) in parts {
                for (o, &x) in dst.iter_mut().zip(p.as_slice()) {
                    *o = *o + x;
                }
            }
        }
        out
    }
}

fn ring_stats<T: Scalar>(cp_size: usize) -> CollectiveStats {
    CollectiveStats::empty("ring", cp_size, T::DTYPE.size_bytes())
}

/// Runs all ranks round-robin on the calling thread.
pub fn ring_hstu_attention<T: Scalar>(
    contexts: &[RankContext<T>],
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<(Vec<RowMatrix<T>>, CollectiveStats), EngineError> {
    let cp = contexts.len();
    let mut workers: Vec<_> = contexts
        .iter()
        .map(|c| RingWorker::new(c, params, cfg))
        .collect();
    let mut visiting: Vec<_> = contexts.iter().map(kv_message).collect();
    let mut stats = ring_stats::<T>(cp);
    for step in 0..cp {
        for (w, m) in workers.iter_mut().zip(&visiting) {
            w.compute(m)?;
        }
        if step + 1 < cp {
            let (next, st) = ring_send_recv(cp, &vec![step; cp], visiting)?;
            stats.absorb(&st);
            visiting = next;
        }
    }
    Ok((workers.into_iter().map(RingWorker::finish).collect(), stats))
}

/// One rank's side of [`ring_hstu_attention`], for concurrent workers.
pub fn ring_hstu_attention_rank<T: Scalar>(
    handle: &RankHandle<'_>,
    ctx: &RankContext<T>,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<(RowMatrix<T>, CollectiveStats), EngineError> {
    let cp = handle.cp_size();
    let mut worker = RingWorker::new(ctx, params, cfg);
    let mut visiting = kv_message(ctx);
    let mut stats = ring_stats::<T>(cp);
    for step in 0..cp {
        worker.compute(&visiting)?;
        if step + 1 < cp {
            let (next, st) = handle.ring_send_recv(step, visiting)?;
            stats.absorb(&st);
            visiting = next;
        }
    }
    Ok((worker.finish(), stats))
}
