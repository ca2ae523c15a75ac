//! Jagged (ragged) batches and the sequence-dimension chunking used for
//! context parallelism.
//!
//! A batch of `B` variable-length sequences is stored as one flat row-major
//! value matrix plus `B + 1` absolute row offsets. Sequence `b` occupies rows
//! `offsets[b]..offsets[b + 1]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::matrix::{RowMatrix, ShapeError};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JaggedError {
    #[error("offsets must contain at least one entry")]
    EmptyOffsets,
    #[error("offsets must start at 0, found {0}")]
    OffsetsStart(usize),
    #[error("offsets not monotone: offsets[{index}]={prev} > offsets[{}]={next}", index + 1)]
    NonMonotone {
        index: usize,
        prev: usize,
        next: usize,
    },
    #[error("offsets end at {end} but values hold {rows} rows")]
    RowCountMismatch { end: usize, rows: usize },
    #[error("sequence {sequence} has length {length} > max_length {max_length}")]
    SequenceTooLong {
        sequence: usize,
        length: usize,
        max_length: usize,
    },
    #[error("embed_dim must be positive")]
    ZeroEmbedDim,
    #[error("embed_dim mismatch: expected {expected}, found {found}")]
    EmbedDimMismatch { expected: usize, found: usize },
    #[error("cp_size must be at least 1")]
    ZeroCpSize,
    #[error("chunk layout does not match tensor: {0}")]
    LayoutMismatch(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("record dtype {found} does not match requested {expected}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("malformed record: {0}")]
    Record(String),
}

fn validate_offsets(offsets: &[usize], rows: usize) -> Result<(), JaggedError> {
    let first = *offsets.first().ok_or(JaggedError::EmptyOffsets)?;
    if first != 0 {
        return Err(JaggedError::OffsetsStart(first));
    }
    for (index, w) in offsets.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(JaggedError::NonMonotone {
                index,
                prev: w[0],
                next: w[1],
            });
        }
    }
    let end = *offsets.last().unwrap();
    if end != rows {
        return Err(JaggedError::RowCountMismatch { end, rows });
    }
    Ok(())
}

fn lengths_of(offsets: &[usize]) -> Vec<usize> {
    offsets.windows(2).map(|w| w[1] - w[0]).collect()
}

fn offsets_of(lengths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    offsets.push(0);
    let mut acc = 0;
    for &l in lengths {
        acc += l;
        offsets.push(acc);
    }
    offsets
}

/// Batch of variable-length token-embedding sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct JaggedTensor<T> {
    values: RowMatrix<T>,
    offsets: Vec<usize>,
    max_length: usize,
}

impl<T: Scalar> JaggedTensor<T> {
    pub fn new(
        values: RowMatrix<T>,
        offsets: Vec<usize>,
        max_length: usize,
    ) -> Result<Self, JaggedError> {
        if values.cols() == 0 {
            return Err(JaggedError::ZeroEmbedDim);
        }
        validate_offsets(&offsets, values.rows())?;
        for (sequence, length) in lengths_of(&offsets).into_iter().enumerate() {
            if length > max_length {
                return Err(JaggedError::SequenceTooLong {
                    sequence,
                    length,
                    max_length,
                });
            }
        }
        Ok(Self {
            values,
            offsets,
            max_length,
        })
    }

    /// Convenience constructor from a flat row-major buffer.
    pub fn from_flat(
        embed_dim: usize,
        values: Vec<T>,
        offsets: Vec<usize>,
        max_length: usize,
    ) -> Result<Self, JaggedError> {
        if embed_dim == 0 {
            return Err(JaggedError::ZeroEmbedDim);
        }
        Self::new(
            RowMatrix::from_flat(embed_dim, values)?,
            offsets,
            max_length,
        )
    }

    /// Builds a batch from per-sequence lengths; `max_length` is the longest one.
    pub fn from_lengths(
        embed_dim: usize,
        values: Vec<T>,
        lengths: &[usize],
    ) -> Result<Self, JaggedError> {
        let max_length = lengths.iter().copied().max().unwrap_or(0);
        Self::from_flat(embed_dim, values, offsets_of(lengths), max_length)
    }

    pub fn values(&self) -> &RowMatrix<T> {
        &self.values
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn embed_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn lengths(&self) -> Vec<usize> {
        lengths_of(&self.offsets)
    }

    pub fn sequence_rows(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Row-major values of sequence `b`.
    pub fn sequence(&self, b: usize) -> &[T] {
        self.values.row_block(self.offsets[b], self.offsets[b + 1])
    }

    pub fn into_values(self) -> RowMatrix<T> {
        self.values
    }

    /// Concatenates batches along the batch dimension, preserving order.
    pub fn concat(parts: &[&JaggedTensor<T>]) -> Result<Self, JaggedError> {
        let Some(first) = parts.first() else {
            return Err(JaggedError::EmptyOffsets);
        };
        let embed_dim = first.embed_dim();
        let mut data = Vec::new();
        let mut lengths = Vec::new();
        let mut max_length = 0;
        for p in parts {
            if p.embed_dim() != embed_dim {
                return Err(JaggedError::EmbedDimMismatch {
                    expected: embed_dim,
                    found: p.embed_dim(),
                });
            }
            data.extend_from_slice(p.values.as_slice());
            lengths.extend(p.lengths());
            max_length = max_length.max(p.max_length);
        }
        Self::from_flat(embed_dim, data, offsets_of(&lengths), max_length)
    }

    pub fn cast<U: Scalar>(&self) -> JaggedTensor<U> {
        let data = self
            .values
            .as_slice()
            .iter()
            .map(|v| U::of(v.as_f64()))
            .collect();
        JaggedTensor {
            values: RowMatrix::from_vec(self.values.rows(), self.values.cols(), data)
                .expect("shape preserved"),
            offsets: self.offsets.clone(),
            max_length: self.max_length,
        }
    }

    pub fn to_record(&self) -> JaggedRecord {
        JaggedRecord {
            embed_dim: self.embed_dim(),
            offsets: self.offsets.clone(),
            max_length: self.max_length,
            values: self.values.as_slice().iter().map(|v| v.as_f64()).collect(),
            dtype: T::DTYPE,
        }
    }

    pub fn from_record(record: JaggedRecord) -> Result<Self, JaggedError> {
        if record.dtype != T::DTYPE {
            return Err(JaggedError::DtypeMismatch {
                expected: T::DTYPE,
                found: record.dtype,
            });
        }
        let values = record.values.into_iter().map(T::of).collect();
        Self::from_flat(record.embed_dim, values, record.offsets, record.max_length)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, JaggedError> {
        let record: JaggedRecord =
            serde_json::from_str(s).map_err(|e| JaggedError::Record(e.to_string()))?;
        Self::from_record(record)
    }
}

/// Self-describing on-disk form of a [`JaggedTensor`].
///
/// Values are stored row-major as `f64`; `f32` tensors widen losslessly and
/// narrow back bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaggedRecord {
    pub embed_dim: usize,
    pub offsets: Vec<usize>,
    pub max_length: usize,
    pub values: Vec<f64>,
    pub dtype: DType,
}

/// One integer per token (e.g. interaction timestamps in seconds).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SeriesRecord", into = "SeriesRecord")]
pub struct JaggedIntSeries {
    values: Vec<i64>,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SeriesRecord {
    offsets: Vec<usize>,
    values: Vec<i64>,
}

impl TryFrom<SeriesRecord> for JaggedIntSeries {
    type Error = JaggedError;

    fn try_from(r: SeriesRecord) -> Result<Self, Self::Error> {
        JaggedIntSeries::new(r.values, r.offsets)
    }
}

impl From<JaggedIntSeries> for SeriesRecord {
    fn from(s: JaggedIntSeries) -> Self {
        SeriesRecord {
            offsets: s.offsets,
            values: s.values,
        }
    }
}

impl JaggedIntSeries {
    pub fn new(values: Vec<i64>, offsets: Vec<usize>) -> Result<Self, JaggedError> {
        validate_offsets(&offsets, values.len())?;
        Ok(Self { values, offsets })
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn lengths(&self) -> Vec<usize> {
        lengths_of(&self.offsets)
    }

    pub fn sequence(&self, b: usize) -> &[i64] {
        &self.values[self.offsets[b]..self.offsets[b + 1]]
    }

    pub fn concat(parts: &[&JaggedIntSeries]) -> Self {
        let mut values = Vec::new();
        let mut lengths = Vec::new();
        for p in parts {
            values.extend_from_slice(&p.values);
            lengths.extend(p.lengths());
        }
        Self {
            values,
            offsets: offsets_of(&lengths),
        }
    }
}

/// Near-even split of `len` tokens into `parts` contiguous pieces; the first
/// `len % parts` pieces receive one extra token.
pub fn split_even(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let rem = len % parts;
    (0..parts).map(|c| base + usize::from(c < rem)).collect()
}

/// Per-sequence split into `2 * cp_size` contiguous mini-chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniChunkLayout {
    cp_size: usize,
    /// `bounds[b]` holds `2 * cp_size + 1` ascending positions; chunk `c` of
    /// sequence `b` covers `bounds[b][c]..bounds[b][c + 1]`.
    bounds: Vec<Vec<usize>>,
}

impl MiniChunkLayout {
    pub fn cp_size(&self) -> usize {
        self.cp_size
    }

    pub fn chunks_per_sequence(&self) -> usize {
        2 * self.cp_size
    }

    pub fn num_sequences(&self) -> usize {
        self.bounds.len()
    }

    pub fn chunk_range(&self, sequence: usize, chunk: usize) -> Range<usize> {
        self.bounds[sequence][chunk]..self.bounds[sequence][chunk + 1]
    }

    pub fn chunk_lengths(&self, sequence: usize) -> Vec<usize> {
        self.bounds[sequence]
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect()
    }

    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.bounds.iter().map(|b| *b.last().unwrap()).collect()
    }

    /// Chunk ranges of every sequence, indexed `[sequence][chunk]`.
    pub fn ranges(&self) -> Vec<Vec<Range<usize>>> {
        (0..self.num_sequences())
            .map(|b| {
                (0..self.chunks_per_sequence())
                    .map(|c| self.chunk_range(b, c))
                    .collect()
            })
            .collect()
    }
}

pub fn make_minichunks(lengths: &[usize], cp_size: usize) -> Result<MiniChunkLayout, JaggedError> {
    if cp_size == 0 {
        return Err(JaggedError::ZeroCpSize);
    }
    let bounds = lengths
        .iter()
        .map(|&len| offsets_of(&split_even(len, 2 * cp_size)))
        .collect();
    Ok(MiniChunkLayout { cp_size, bounds })
}

/// Load-balanced ownership: rank `i` owns mini-chunks `i` and `2 * cp_size - 1 - i`.
pub fn chunk_assignment(cp_size: usize) -> Vec<(usize, usize)> {
    (0..cp_size).map(|i| (i, 2 * cp_size - 1 - i)).collect()
}

/// Owning rank of each mini-chunk index under [`chunk_assignment`].
pub fn balanced_chunk_owners(cp_size: usize) -> Vec<usize> {
    let mut owners = vec![0; 2 * cp_size];
    for (rank, (a, b)) in chunk_assignment(cp_size).into_iter().enumerate() {
        owners[a] = rank;
        owners[b] = rank;
    }
    owners
}

/// Row gather map produced by a reorder, with enough metadata to undo it.
///
/// Output row `i` of the reordered tensor is source row `rows[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPermutation {
    pub rows: Vec<usize>,
    pub source_offsets: Vec<usize>,
}

impl RowPermutation {
    pub fn identity(offsets: &[usize]) -> Self {
        let total = offsets.last().copied().unwrap_or(0);
        Self {
            rows: (0..total).collect(),
            source_offsets: offsets.to_vec(),
        }
    }
}

/// Rows of rank `rank`'s slab inside a tensor returned by [`reorder_balanced`]
/// or [`reorder_by_owner`] for a batch of `num_sequences` sequences.
pub fn rank_slab_rows<T: Scalar>(
    reordered: &JaggedTensor<T>,
    num_sequences: usize,
    rank: usize,
) -> Range<usize> {
    let o = reordered.offsets();
    o[rank * num_sequences]..o[(rank + 1) * num_sequences]
}

/// Groups rows by owning rank, then by sequence, then by chunk index.
///
/// `chunk_ranges[b][c]` is the position range of chunk `c` in sequence `b`
/// and `owners[c]` its rank. The result has one segment per (rank, sequence)
/// pair, rank-major.
pub fn reorder_by_owner<T: Scalar>(
    jt: &JaggedTensor<T>,
    chunk_ranges: &[Vec<Range<usize>>],
    owners: &[usize],
    num_ranks: usize,
) -> Result<(JaggedTensor<T>, RowPermutation), JaggedError> {
    let lengths = jt.lengths();
    if chunk_ranges.len() != lengths.len() {
        return Err(JaggedError::LayoutMismatch(format!(
            "layout has {} sequences, tensor has {}",
            chunk_ranges.len(),
            lengths.len()
        )));
    }
    for (b, (ranges, &len)) in chunk_ranges.iter().zip(&lengths).enumerate() {
        if ranges.len() != owners.len() {
            return Err(JaggedError::LayoutMismatch(format!(
                "sequence {b} has {} chunks, expected {}",
                ranges.len(),
                owners.len()
            )));
        }
        let covered = ranges.last().map_or(0, |r| r.end);
        if covered != len || ranges.first().map_or(0, |r| r.start) != 0 {
            return Err(JaggedError::LayoutMismatch(format!(
                "sequence {b} has length {len} but chunks cover 0..{covered}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(jt.total_tokens());
    let mut segment_lengths = Vec::with_capacity(num_ranks * lengths.len());
    for rank in 0..num_ranks {
        for (b, ranges) in chunk_ranges.iter().enumerate() {
            let base = jt.offsets()[b];
            let before = rows.len();
            for (c, r) in ranges.iter().enumerate() {
                if owners[c] == rank {
                    rows.extend(r.clone().map(|p| base + p));
                }
            }
            segment_lengths.push(rows.len() - before);
        }
    }
    if rows.len() != jt.total_tokens() {
        return Err(JaggedError::LayoutMismatch(
            "chunk owners do not cover every row exactly once".into(),
        ));
    }
    let values = jt.values().gather_rows(&rows);
    let out = JaggedTensor::new(values, offsets_of(&segment_lengths), jt.max_length())?;
    Ok((
        out,
        RowPermutation {
            rows,
            source_offsets: jt.offsets().to_vec(),
        },
    ))
}

/// Rank-major reorder under the load-balanced mini-chunk assignment.
pub fn reorder_balanced<T: Scalar>(
    jt: &JaggedTensor<T>,
    layout: &MiniChunkLayout,
) -> Result<(JaggedTensor<T>, RowPermutation), JaggedError> {
    if layout.sequence_lengths() != jt.lengths() {
        return Err(JaggedError::LayoutMismatch(format!(
            "layout lengths {:?} != tensor lengths {:?}",
            layout.sequence_lengths(),
            jt.lengths()
        )));
    }
    reorder_by_owner(
        jt,
        &layout.ranges(),
        &balanced_chunk_owners(layout.cp_size()),
        layout.cp_size(),
    )
}

/// Undoes a reorder, restoring the source row order and offsets bit-exactly.
pub fn inverse_reorder<T: Scalar>(
    jt: &JaggedTensor<T>,
    permutation: &RowPermutation,
) -> Result<JaggedTensor<T>, JaggedError> {
    let n = jt.total_tokens();
    if permutation.rows.len() != n {
        return Err(JaggedError::InvalidPermutation(format!(
            "permutation has {} entries for {n} rows",
            permutation.rows.len()
        )));
    }
    let mut inverse = vec![usize::MAX; n];
    for (i, &src) in permutation.rows.iter().enumerate() {
        if src >= n {
            return Err(JaggedError::InvalidPermutation(format!(
                "index {src} out of range for {n} rows"
            )));
        }
        if inverse[src] != usize::MAX {
            return Err(JaggedError::InvalidPermutation(format!(
                "index {src} appears more than once"
            )));
        }
        inverse[src] = i;
    }
    let values = jt.values().gather_rows(&inverse);
    JaggedTensor::new(values, permutation.source_offsets.clone(), jt.max_length())
}
