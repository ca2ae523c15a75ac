//! Simulated collectives over jagged payloads with byte and memory accounting.
//!
//! Every collective exists in two forms. The group-level functions in this
//! module take all ranks' inputs at once and are what a single-threaded,
//! round-based driver calls. [`RankGroup`] exposes the same collectives per
//! rank for concurrent workers: each call blocks until the whole group has
//! arrived, and the last arriving rank runs the group-level function on
//! everyone's behalf. Both schedules therefore produce identical outputs and
//! identical statistics.
//!
//! Accounting model (value payloads only, metadata reported separately):
//!
//! * AllGather is in place: each rank allocates the full concatenated buffer
//!   and its own contribution already lives inside it, so the peak resident
//!   payload is the total gathered size.
//! * AllToAll runs a header phase (so receivers can size buffers) followed by
//!   `cp - 1` pairwise payload rounds. In round `k` rank `r` ships its message
//!   for `(r + k) % cp`, releases that staging region, then lands the message
//!   from `(r - k) % cp`. Self-addressed messages never move. The peak is the
//!   maximum resident payload observed at any round boundary.
//! * A ring step double-buffers: the outgoing and incoming payload are
//!   resident at the same time.
//!
//! Self traffic is never counted in bytes sent or received.

mod group;

use serde::{Deserialize, Serialize};

use crate::jagged::{JaggedError, JaggedIntSeries, JaggedTensor};
use crate::matrix::RowMatrix;
use crate::scalar::Scalar;

pub use group::{RankGroup, RankHandle};

/// Bytes used to describe one integer of metadata on the wire.
pub const METADATA_WORD_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommError {
    #[error("collective expected {expected} ranks, got {found}")]
    RankMissing { expected: usize, found: usize },
    #[error("rank {rank} out of range for group of {cp_size}")]
    RankOutOfRange { rank: usize, cp_size: usize },
    #[error("rank {rank} entered {found} while the group expected {expected}")]
    StepMismatch {
        rank: usize,
        expected: String,
        found: String,
    },
    #[error("rank {rank} timed out in {op}: not every rank reached the collective")]
    Timeout { rank: usize, op: String },
    #[error("group aborted: {0}")]
    Aborted(String),
    #[error("embed_dim mismatch: rank {rank} has {found}, expected {expected}")]
    EmbedDimMismatch {
        rank: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed message from rank {src} to rank {dst}: {reason}")]
    MessageShape {
        src: usize,
        dst: usize,
        reason: String,
    },
    #[error(transparent)]
    Jagged(#[from] JaggedError),
}

/// Per-rank traffic for one collective. Serializes to the report schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub rank: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub messages: u64,
    pub peak_resident_bytes: u64,
}

impl CommStats {
    fn new(rank: usize) -> Self {
        Self {
            rank,
            bytes_sent: 0,
            bytes_received: 0,
            messages: 0,
            peak_resident_bytes: 0,
        }
    }
}

/// Header and timestamp traffic, kept apart from value payloads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveStats {
    pub collective: String,
    pub dtype_size: usize,
    pub ranks: Vec<CommStats>,
    pub metadata: Vec<MetadataStats>,
    pub final_resident_bytes: Vec<u64>,
}

impl CollectiveStats {
    /// A record with no traffic, e.g. the starting point for [`Self::absorb`].
    pub fn empty(collective: &str, cp_size: usize, dtype_size: usize) -> Self {
        Self {
            collective: collective.to_string(),
            dtype_size,
            ranks: (0..cp_size).map(CommStats::new).collect(),
            metadata: vec![MetadataStats::default(); cp_size],
            final_resident_bytes: vec![0; cp_size],
        }
    }

    pub fn total_sent(&self) -> u64 {
        self.ranks.iter().map(|r| r.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.ranks.iter().map(|r| r.bytes_received).sum()
    }

    pub fn max_peak(&self) -> u64 {
        self.ranks
            .iter()
            .map(|r| r.peak_resident_bytes)
            .max()
            .unwrap_or(0)
    }

    /// Folds another collective of the same group into this one: traffic adds
    /// up, peaks take the maximum, final residency follows `other`.
    pub fn absorb(&mut self, other: &CollectiveStats) {
        for (a, b) in self.ranks.iter_mut().zip(&other.ranks) {
            a.bytes_sent += b.bytes_sent;
            a.bytes_received += b.bytes_received;
            a.messages += b.messages;
            a.peak_resident_bytes = a.peak_resident_bytes.max(b.peak_resident_bytes);
        }
        for (a, b) in self.metadata.iter_mut().zip(&other.metadata) {
            a.bytes_sent += b.bytes_sent;
            a.bytes_received += b.bytes_received;
        }
        self.final_resident_bytes
            .clone_from(&other.final_resident_bytes);
    }

    /// Renames a copy of this record.
    pub fn named(mut self, collective: &str) -> Self {
        self.collective = collective.to_string();
        self
    }
}

/// Describes one contiguous run of a sequence inside a message payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkHeader {
    /// Sequence id within the CP group's combined batch.
    pub sequence: usize,
    pub chunk: usize,
    /// Position of the first token within its sequence.
    pub start: usize,
    pub tokens: usize,
}

impl ChunkHeader {
    pub fn end(&self) -> usize {
        self.start + self.tokens
    }
}

/// Chunked token rows plus the header needed to place them.
#[derive(Debug, Clone, PartialEq)]
pub struct JaggedMessage<T> {
    header: Vec<ChunkHeader>,
    payload: RowMatrix<T>,
    timestamps: Option<Vec<i64>>,
}

impl<T: Scalar> JaggedMessage<T> {
    pub fn new(
        header: Vec<ChunkHeader>,
        payload: RowMatrix<T>,
        timestamps: Option<Vec<i64>>,
    ) -> Result<Self, String> {
        let rows: usize = header.iter().map(|h| h.tokens).sum();
        if rows != payload.rows() {
            return Err(format!(
                "header describes {rows} rows but payload holds {}",
                payload.rows()
            ));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != rows {
                return Err(format!("{} timestamps for {rows} rows", ts.len()));
            }
        }
        Ok(Self {
            header,
            payload,
            timestamps,
        })
    }

    pub fn empty(width: usize, with_timestamps: bool) -> Self {
        Self {
            header: Vec::new(),
            payload: RowMatrix::zeros(0, width),
            timestamps: with_timestamps.then(Vec::new),
        }
    }

    pub fn header(&self) -> &[ChunkHeader] {
        &self.header
    }

    pub fn payload(&self) -> &RowMatrix<T> {
        &self.payload
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.payload.rows()
    }

    pub fn width(&self) -> usize {
        self.payload.cols()
    }

    pub fn into_parts(self) -> (Vec<ChunkHeader>, RowMatrix<T>, Option<Vec<i64>>) {
        (self.header, self.payload, self.timestamps)
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload.payload_bytes()
    }

    /// Header words (count + four per chunk) plus timestamps.
    pub fn metadata_bytes(&self) -> u64 {
        let words = 1 + 4 * self.header.len() as u64;
        let ts = self.timestamps.as_ref().map_or(0, |t| t.len() as u64);
        (words + ts) * METADATA_WORD_BYTES
    }
}

/// One rank's contribution to (or result of) an AllGather.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPart<T> {
    pub values: JaggedTensor<T>,
    pub timestamps: Option<JaggedIntSeries>,
}

impl<T: Scalar> From<JaggedTensor<T>> for GatherPart<T> {
    fn from(values: JaggedTensor<T>) -> Self {
        Self {
            values,
            timestamps: None,
        }
    }
}

impl<T: Scalar> GatherPart<T> {
    fn metadata_bytes(&self) -> u64 {
        let offsets = self.values.offsets().len() as u64;
        let ts = self
            .timestamps
            .as_ref()
            .map_or(0, |t| t.values().len() as u64);
        (offsets + ts) * METADATA_WORD_BYTES
    }
}

fn check_ranks(expected: usize, found: usize) -> Result<(), CommError> {
    if expected != found {
        return Err(CommError::RankMissing { expected, found });
    }
    Ok(())
}

/// Every rank ends with the concatenation of all local batches, rank order.
pub fn all_gather_jagged<T: Scalar>(
    cp_size: usize,
    locals: Vec<GatherPart<T>>,
) -> Result<(Vec<GatherPart<T>>, CollectiveStats), CommError> {
    check_ranks(cp_size, locals.len())?;
    let embed_dim = locals[0].values.embed_dim();
    let with_ts = locals[0].timestamps.is_some();
    for (rank, part) in locals.iter().enumerate() {
        if part.values.embed_dim() != embed_dim {
            return Err(CommError::EmbedDimMismatch {
                rank,
                expected: embed_dim,
                found: part.values.embed_dim(),
            });
        }
        if part.timestamps.is_some() != with_ts {
            return Err(CommError::MessageShape {
                src: rank,
                dst: rank,
                reason: "timestamps must be present on every rank or none".into(),
            });
        }
        if let Some(ts) = &part.timestamps {
            if ts.offsets() != part.values.offsets() {
                return Err(CommError::MessageShape {
                    src: rank,
                    dst: rank,
                    reason: "timestamp offsets differ from value offsets".into(),
                });
            }
        }
    }

    let payload: Vec<u64> = locals
        .iter()
        .map(|p| p.values.values().payload_bytes())
        .collect();
    let metadata: Vec<u64> = locals.iter().map(GatherPart::metadata_bytes).collect();
    let total: u64 = payload.iter().sum();
    let total_meta: u64 = metadata.iter().sum();
    let peers = (cp_size - 1) as u64;

    let mut stats = CollectiveStats::empty("all_gather", cp_size, T::DTYPE.size_bytes());
    for r in 0..cp_size {
        let s = &mut stats.ranks[r];
        s.bytes_sent = payload[r] * peers;
        s.bytes_received = total - payload[r];
        s.messages = if payload[r] > 0 { peers } else { 0 };
        s.peak_resident_bytes = total;
        stats.metadata[r] = MetadataStats {
            bytes_sent: metadata[r] * peers,
            bytes_received: total_meta - metadata[r],
        };
        stats.final_resident_bytes[r] = total;
    }

    let values = JaggedTensor::concat(&locals.iter().map(|p| &p.values).collect::<Vec<_>>())?;
    let timestamps = with_ts.then(|| {
        JaggedIntSeries::concat(
            &locals
                .iter()
                .map(|p| p.timestamps.as_ref().unwrap())
                .collect::<Vec<_>>(),
        )
    });
    let gathered = GatherPart { values, timestamps };
    Ok((vec![gathered; cp_size], stats))
}

/// Messages indexed `[rank][peer]`.
pub type MessageGrid<T> = Vec<Vec<JaggedMessage<T>>>;

/// Personalized exchange: `sends[src][dst]` arrives as `received[dst][src]`.
pub fn all_to_all_jagged<T: Scalar>(
    cp_size: usize,
    sends: MessageGrid<T>,
) -> Result<(MessageGrid<T>, CollectiveStats), CommError> {
    check_ranks(cp_size, sends.len())?;
    let width = sends
        .iter()
        .flatten()
        .next()
        .map_or(0, JaggedMessage::width);
    for (src, row) in sends.iter().enumerate() {
        check_ranks(cp_size, row.len())?;
        for (dst, m) in row.iter().enumerate() {
            if m.width() != width {
                return Err(CommError::MessageShape {
                    src,
                    dst,
                    reason: format!("payload width {} != {width}", m.width()),
                });
            }
            let rows: usize = m.header.iter().map(|h| h.tokens).sum();
            if rows != m.rows() {
                return Err(CommError::MessageShape {
                    src,
                    dst,
                    reason: format!("header describes {rows} rows, payload has {}", m.rows()),
                });
            }
        }
    }

    let bytes: Vec<Vec<u64>> = sends
        .iter()
        .map(|row| row.iter().map(JaggedMessage::payload_bytes).collect())
        .collect();
    let meta: Vec<Vec<u64>> = sends
        .iter()
        .map(|row| row.iter().map(JaggedMessage::metadata_bytes).collect())
        .collect();

    let mut stats = CollectiveStats::empty("all_to_all", cp_size, T::DTYPE.size_bytes());
    for r in 0..cp_size {
        let mut resident: u64 = bytes[r].iter().sum();
        let mut peak = resident;
        let s = &mut stats.ranks[r];
        for k in 1..cp_size {
            let dst = (r + k) % cp_size;
            let src = (r + cp_size - k) % cp_size;
            resident -= bytes[r][dst];
            resident += bytes[src][r];
            peak = peak.max(resident);
            s.bytes_sent += bytes[r][dst];
            s.bytes_received += bytes[src][r];
            s.messages += u64::from(bytes[r][dst] > 0);
            stats.metadata[r].bytes_sent += meta[r][dst];
            stats.metadata[r].bytes_received += meta[src][r];
        }
        s.peak_resident_bytes = peak;
        stats.final_resident_bytes[r] = resident;
    }

    let mut received: Vec<Vec<Option<JaggedMessage<T>>>> = (0..cp_size)
        .map(|_| (0..cp_size).map(|_| None).collect())
        .collect();
    for (src, row) in sends.into_iter().enumerate() {
        for (dst, m) in row.into_iter().enumerate() {
            received[dst][src] = Some(m);
        }
    }
    let received = received
        .into_iter()
        .map(|row| row.into_iter().map(Option::unwrap).collect())
        .collect();
    Ok((received, stats))
}

/// One ring rotation: rank `r` forwards to `r + 1` and receives from `r - 1`.
///
/// `steps[r]` is the step number rank `r` believes it is on; any disagreement
/// is reported instead of silently pairing the wrong payloads.
pub fn ring_send_recv<T: Scalar>(
    cp_size: usize,
    steps: &[usize],
    payloads: Vec<JaggedMessage<T>>,
) -> Result<(Vec<JaggedMessage<T>>, CollectiveStats), CommError> {
    check_ranks(cp_size, steps.len())?;
    check_ranks(cp_size, payloads.len())?;
    if let Some((rank, &found)) = steps.iter().enumerate().find(|(_, &s)| s != steps[0]) {
        return Err(CommError::StepMismatch {
            rank,
            expected: format!("ring step {}", steps[0]),
            found: format!("ring step {found}"),
        });
    }
    let bytes: Vec<u64> = payloads.iter().map(JaggedMessage::payload_bytes).collect();
    let meta: Vec<u64> = payloads.iter().map(JaggedMessage::metadata_bytes).collect();
    let mut stats = CollectiveStats::empty("ring_send_recv", cp_size, T::DTYPE.size_bytes());
    for r in 0..cp_size {
        let prev = (r + cp_size - 1) % cp_size;
        let s = &mut stats.ranks[r];
        if cp_size > 1 {
            s.bytes_sent = bytes[r];
            s.bytes_received = bytes[prev];
            s.messages = u64::from(bytes[r] > 0);
            s.peak_resident_bytes = bytes[r] + bytes[prev];
            stats.metadata[r] = MetadataStats {
                bytes_sent: meta[r],
                bytes_received: meta[prev],
            };
        } else {
            s.peak_resident_bytes = bytes[r];
        }
        stats.final_resident_bytes[r] = bytes[prev];
    }
    let mut received = payloads;
    received.rotate_right(1);
    Ok((received, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, d: usize, fill: f32) -> JaggedTensor<f32> {
        JaggedTensor::from_flat(d, vec![fill; n * d], vec![0, n], n).unwrap()
    }

    fn msg(rows: usize, width: usize, tag: f64) -> JaggedMessage<f64> {
        let header = if rows > 0 {
            vec![ChunkHeader {
                sequence: 0,
                chunk: 0,
                start: 0,
                tokens: rows,
            }]
        } else {
            vec![]
        };
        JaggedMessage::new(
            header,
            RowMatrix::from_vec(rows, width, vec![tag; rows * width]).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn all_gather_accounting_two_ranks() {
        let parts = vec![tokens(12, 4, 1.0).into(), tokens(12, 4, 2.0).into()];
        let (out, stats) = all_gather_jagged(2, parts).unwrap();
        assert_eq!(out[0].values.total_tokens(), 24);
        assert_eq!(out[0], out[1]);
        for r in &stats.ranks {
            assert_eq!(r.bytes_received, 192);
            assert_eq!(r.bytes_sent, 192);
            assert_eq!(r.peak_resident_bytes, 384);
        }
        assert_eq!(stats.total_sent(), stats.total_received());
    }

    #[test]
    fn all_gather_single_rank_and_empty_rank() {
        let (out, stats) = all_gather_jagged(1, vec![tokens(3, 2, 1.0).into()]).unwrap();
        assert_eq!(out[0].values, tokens(3, 2, 1.0));
        assert_eq!(stats.ranks[0].bytes_received, 0);

        let empty = JaggedTensor::<f32>::from_flat(2, vec![], vec![0], 0).unwrap();
        let (out, stats) =
            all_gather_jagged(2, vec![empty.into(), tokens(3, 2, 1.0).into()]).unwrap();
        assert_eq!(out[0].values.lengths(), vec![3]);
        assert_eq!(stats.total_sent(), stats.total_received());
        assert_eq!(stats.ranks[0].messages, 0);
    }

    #[test]
    fn all_gather_rejects_dim_mismatch_and_missing_rank() {
        let err = all_gather_jagged(2, vec![tokens(1, 2, 0.0).into(), tokens(1, 3, 0.0).into()])
            .unwrap_err();
        assert!(matches!(err, CommError::EmbedDimMismatch { rank: 1, .. }));
        let err = all_gather_jagged(3, vec![tokens(1, 2, 0.0).into()]).unwrap_err();
        assert_eq!(
            err,
            CommError::RankMissing {
                expected: 3,
                found: 1
            }
        );
    }

    #[test]
    fn all_to_all_routes_and_accounts() {
        // rank r sends (r+1)*(dst+1) rows to dst
        let sends: Vec<Vec<_>> = (0..3)
            .map(|r| {
                (0..3)
                    .map(|d| msg((r + 1) * (d + 1), 2, (10 * r + d) as f64))
                    .collect()
            })
            .collect();
        let (recv, stats) = all_to_all_jagged(3, sends).unwrap();
        for (dst, row) in recv.iter().enumerate() {
            for (src, m) in row.iter().enumerate() {
                assert_eq!(m.rows(), (src + 1) * (dst + 1));
                assert_eq!(m.payload().get(0, 0), (10 * src + dst) as f64);
            }
        }
        assert_eq!(stats.total_sent(), stats.total_received());
        // rank 0 sends 2 + 3 rows, receives 2 + 3 rows, 16 bytes per row
        assert_eq!(stats.ranks[0].bytes_sent, 5 * 16);
        assert_eq!(stats.ranks[0].bytes_received, 5 * 16);
        for r in 0..3 {
            assert!(stats.ranks[r].peak_resident_bytes >= stats.final_resident_bytes[r]);
        }
    }

    #[test]
    fn all_to_all_empty_and_single_rank() {
        let sends = vec![
            vec![msg(0, 2, 0.0), msg(0, 2, 0.0)],
            vec![msg(0, 2, 0.0), msg(0, 2, 0.0)],
        ];
        let (recv, stats) = all_to_all_jagged(2, sends).unwrap();
        assert!(recv.iter().flatten().all(|m| m.rows() == 0));
        assert_eq!(stats.total_received(), 0);
        assert_eq!(stats.ranks[0].messages, 0);

        let (recv, stats) = all_to_all_jagged(1, vec![vec![msg(4, 2, 1.0)]]).unwrap();
        assert_eq!(recv[0][0].rows(), 4);
        assert_eq!(stats.ranks[0].bytes_sent + stats.ranks[0].bytes_received, 0);
    }

    #[test]
    fn ring_rotates_payloads() {
        let payloads = vec![msg(1, 1, 0.0), msg(1, 1, 1.0), msg(1, 1, 2.0)];
        let (recv, stats) = ring_send_recv(3, &[0, 0, 0], payloads).unwrap();
        let got: Vec<f64> = recv.iter().map(|m| m.payload().get(0, 0)).collect();
        assert_eq!(got, vec![2.0, 0.0, 1.0]);
        assert_eq!(stats.total_sent(), stats.total_received());

        let (recv, stats) = ring_send_recv(1, &[5], vec![msg(2, 1, 9.0)]).unwrap();
        assert_eq!(recv[0].payload().get(1, 0), 9.0);
        assert_eq!(stats.ranks[0].bytes_sent, 0);
    }

    #[test]
    fn ring_visits_every_origin_once() {
        let cp = 5;
        let mut current: Vec<_> = (0..cp).map(|r| msg(1, 1, r as f64)).collect();
        let mut seen = vec![vec![false; cp]; cp];
        for step in 0..cp - 1 {
            current = ring_send_recv(cp, &vec![step; cp], current).unwrap().0;
            for (r, m) in current.iter().enumerate() {
                let origin = m.payload().get(0, 0) as usize;
                assert_ne!(origin, r);
                assert!(!seen[r][origin]);
                seen[r][origin] = true;
            }
        }
        assert!(seen
            .iter()
            .enumerate()
            .all(|(r, row)| row.iter().enumerate().all(|(o, &s)| s || o == r)));
    }

    #[test]
    fn ring_step_mismatch_detected() {
        let payloads = vec![msg(1, 1, 0.0), msg(1, 1, 1.0)];
        let err = ring_send_recv(2, &[3, 4], payloads).unwrap_err();
        assert!(matches!(err, CommError::StepMismatch { rank: 1, .. }));
    }

    #[test]
    fn message_validates_header() {
        let err = JaggedMessage::<f64>::new(
            vec![ChunkHeader {
                sequence: 0,
                chunk: 0,
                start: 0,
                tokens: 3,
            }],
            RowMatrix::zeros(2, 1),
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn comm_stats_json_schema() {
        let s = CommStats {
            rank: 1,
            bytes_sent: 2,
            bytes_received: 3,
            messages: 4,
            peak_resident_bytes: 5,
        };
        let v: serde_json::Value = serde_json::to_value(s).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            [
                "bytes_received",
                "bytes_sent",
                "messages",
                "peak_resident_bytes",
                "rank"
            ]
        );
    }
}
