use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::jagged::{balanced_chunk_owners, make_minichunks, split_even, MiniChunkLayout};

/// How sequence positions are spread over the CP ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// Rank `i` takes the `i`-th of `cp` contiguous slices. Baseline only.
    NaiveContiguous,
    /// Rank `i` takes mini-chunks `i` and `2 * cp - 1 - i` of `2 * cp`.
    BalancedMinichunk,
}

impl std::str::FromStr for BalanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive_contiguous" | "naive" => Ok(Self::NaiveContiguous),
            "balanced_minichunk" | "balanced" => Ok(Self::BalancedMinichunk),
            other => Err(format!(
                "unknown balance mode '{other}' (expected naive_contiguous or balanced_minichunk)"
            )),
        }
    }
}

impl std::fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NaiveContiguous => "naive_contiguous",
            Self::BalancedMinichunk => "balanced_minichunk",
        })
    }
}

/// A run of positions `start..end` of one sequence owned by one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    /// Sequence id in the CP group's combined batch.
    pub sequence: usize,
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Token-to-rank assignment for one CP group.
///
/// The cp local batches are concatenated in rank order into a combined batch;
/// every sequence of that batch is cut into chunks and each chunk is owned by
/// exactly one rank. Empty chunks are not listed in the per-rank spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    cp_size: usize,
    balance_mode: BalanceMode,
    local_lengths: Vec<Vec<usize>>,
    max_lengths: Vec<usize>,
    first_sequence: Vec<usize>,
    sequence_origin: Vec<usize>,
    chunk_ranges: Vec<Vec<Range<usize>>>,
    chunk_owners: Vec<usize>,
    layout: Option<MiniChunkLayout>,
    rank_spans: Vec<Vec<ChunkSpan>>,
}

fn ranges_of(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut at = 0;
    lengths
        .iter()
        .map(|&l| {
            let r = at..at + l;
            at += l;
            r
        })
        .collect()
}

pub fn build_shard_plan(
    lengths: &[Vec<usize>],
    cp_size: usize,
    balance_mode: BalanceMode,
) -> Result<ShardPlan, EngineError> {
    if cp_size == 0 {
        return Err(EngineError::ZeroCpSize);
    }
    if lengths.len() != cp_size {
        return Err(EngineError::PlanMismatch(format!(
            "expected {cp_size} per-rank batches, got {}",
            lengths.len()
        )));
    }
    let mut first_sequence = Vec::with_capacity(cp_size);
    let mut sequence_origin = Vec::new();
    let mut combined = Vec::new();
    for (rank, local) in lengths.iter().enumerate() {
        first_sequence.push(combined.len());
        combined.extend_from_slice(local);
        sequence_origin.extend(std::iter::repeat_n(rank, local.len()));
    }

    let (chunk_ranges, chunk_owners, layout) = match balance_mode {
        BalanceMode::BalancedMinichunk => {
            let layout = make_minichunks(&combined, cp_size)?;
            (
                layout.ranges(),
                balanced_chunk_owners(cp_size),
                Some(layout),
            )
        }
        BalanceMode::NaiveContiguous => (
            combined
                .iter()
                .map(|&l| ranges_of(&split_even(l, cp_size)))
                .collect(),
            (0..cp_size).collect(),
            None,
        ),
    };

    let mut rank_spans = vec![Vec::new(); cp_size];
    for (sequence, ranges) in chunk_ranges.iter().enumerate() {
        for (chunk, r) in ranges.iter().enumerate() {
            if !r.is_empty() {
                rank_spans[chunk_owners[chunk]].push(ChunkSpan {
                    sequence,
                    chunk,
                    start: r.start,
                    end: r.end,
                });
            }
        }
    }

    Ok(ShardPlan {
        cp_size,
        balance_mode,
        max_lengths: lengths
            .iter()
            .map(|l| l.iter().copied().max().unwrap_or(0))
            .collect(),
        local_lengths: lengths.to_vec(),
        first_sequence,
        sequence_origin,
        chunk_ranges,
        chunk_owners,
        layout,
        rank_spans,
    })
}

impl ShardPlan {
    pub fn cp_size(&self) -> usize {
        self.cp_size
    }

    pub fn balance_mode(&self) -> BalanceMode {
        self.balance_mode
    }

    pub fn num_sequences(&self) -> usize {
        self.sequence_origin.len()
    }

    /// Lengths of the combined batch, rank order.
    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.local_lengths.iter().flatten().copied().collect()
    }

    pub fn local_lengths(&self, rank: usize) -> &[usize] {
        &self.local_lengths[rank]
    }

    pub fn max_length(&self, rank: usize) -> usize {
        self.max_lengths[rank]
    }

    /// Overrides the per-rank `max_length` used when outputs are restored.
    pub fn with_max_lengths(mut self, max_lengths: Vec<usize>) -> Result<Self, EngineError> {
        if max_lengths.len() != self.cp_size {
            return Err(EngineError::PlanMismatch(format!(
                "{} max lengths for {} ranks",
                max_lengths.len(),
                self.cp_size
            )));
        }
        self.max_lengths = max_lengths;
        Ok(self)
    }

    /// Global id of rank `rank`'s first local sequence.
    pub fn first_sequence(&self, rank: usize) -> usize {
        self.first_sequence[rank]
    }

    /// DP rank whose local batch holds sequence `sequence`.
    pub fn origin_rank(&self, sequence: usize) -> usize {
        self.sequence_origin[sequence]
    }

    pub fn chunk_ranges(&self) -> &[Vec<Range<usize>>] {
        &self.chunk_ranges
    }

    pub fn chunk_owner(&self, chunk: usize) -> usize {
        self.chunk_owners[chunk]
    }

    pub fn chunk_owners(&self) -> &[usize] {
        &self.chunk_owners
    }

    /// Present under [`BalanceMode::BalancedMinichunk`].
    pub fn minichunk_layout(&self) -> Option<&MiniChunkLayout> {
        self.layout.as_ref()
    }

    /// Spans owned by `rank`, ordered by sequence then chunk index.
    pub fn rank_spans(&self, rank: usize) -> &[ChunkSpan] {
        &self.rank_spans[rank]
    }

    pub fn resident_tokens(&self, rank: usize) -> usize {
        self.rank_spans[rank].iter().map(ChunkSpan::len).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.local_lengths.iter().flatten().sum()
    }
}
