//! HSTU attention on jagged batches.
//!
//! Per sequence, scores are `S = (Q Kᵀ + Bias) / sqrt(d_k)`, activated with
//! SiLU (no softmax), masked causally (key position ≤ query position, diagonal
//! kept), and multiplied with `V`. The additive bias is looked up from learnable
//! per-bucket weights indexed by bucketized query/key timestamp differences.
//!
//! Since the activation is elementwise, the output for a query row is a plain
//! sum over key blocks; [`blockwise_partial`] computes one such term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::jagged::{JaggedError, JaggedIntSeries, JaggedTensor};
use crate::matrix::RowMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error(transparent)]
    Jagged(#[from] JaggedError),
    #[error("num_buckets must be at least 1")]
    ZeroBuckets,
    #[error("ts_weights has {found} entries, config expects {expected}")]
    BiasLength { expected: usize, found: usize },
    #[error("offsets of {what} differ from Q offsets")]
    OffsetMismatch { what: &'static str },
    #[error("embed_dim of {what} is {found}, expected {expected}")]
    EmbedDimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("block shape mismatch: {0}")]
    BlockShape(String),
    #[error("invalid normal distribution (mean {mean}, stddev {stddev})")]
    InvalidInit { mean: f64, stddev: f64 },
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// d/dx SiLU(x) = σ(x)·(1 + x·(1 − σ(x))).
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Maps a non-negative time gap (seconds) to a raw, unclamped bucket index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BucketTransform {
    /// `floor(ln(1 + delta))`
    Log1p,
    /// `floor(delta / seconds)`
    Linear { seconds: u64 },
}

impl BucketTransform {
    fn raw_bucket(self, delta: u64) -> u64 {
        match self {
            BucketTransform::Log1p => (delta as f64).ln_1p().floor() as u64,
            BucketTransform::Linear { seconds } => delta / seconds.max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub num_buckets: usize,
    pub transform: BucketTransform,
}

impl BiasConfig {
    pub fn new(num_buckets: usize) -> Result<Self, AttentionError> {
        Self::with_transform(num_buckets, BucketTransform::Log1p)
    }

    pub fn with_transform(
        num_buckets: usize,
        transform: BucketTransform,
    ) -> Result<Self, AttentionError> {
        if num_buckets == 0 {
            return Err(AttentionError::ZeroBuckets);
        }
        Ok(Self {
            num_buckets,
            transform,
        })
    }
}

/// Bucket of a query-minus-key time difference. Negative deltas land in bucket
/// 0; anything past the last bucket is clamped to `num_buckets - 1`.
pub fn bucketize(delta: i64, cfg: &BiasConfig) -> usize {
    let raw = cfg.transform.raw_bucket(delta.max(0) as u64);
    raw.min(cfg.num_buckets as u64 - 1) as usize
}

/// Learnable per-bucket bias weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasParams<T> {
    ts_weights: Vec<T>,
}

impl<T: Scalar> BiasParams<T> {
    pub fn new(ts_weights: Vec<T>, cfg: &BiasConfig) -> Result<Self, AttentionError> {
        if ts_weights.len() != cfg.num_buckets {
            return Err(AttentionError::BiasLength {
                expected: cfg.num_buckets,
                found: ts_weights.len(),
            });
        }
        Ok(Self { ts_weights })
    }

    /// Seeded draw from `Normal(mean, stddev)`, one weight per bucket.
    pub fn init_normal(
        cfg: &BiasConfig,
        mean: f64,
        stddev: f64,
        seed: u64,
    ) -> Result<Self, AttentionError> {
        if !(mean.is_finite() && stddev.is_finite() && stddev >= 0.0) {
            return Err(AttentionError::InvalidInit { mean, stddev });
        }
        let normal =
            Normal::new(mean, stddev).map_err(|_| AttentionError::InvalidInit { mean, stddev })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts_weights = (0..cfg.num_buckets)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        Ok(Self { ts_weights })
    }

    pub fn ts_weights(&self) -> &[T] {
        &self.ts_weights
    }

    pub fn ts_weights_mut(&mut self) -> &mut [T] {
        &mut self.ts_weights
    }

    pub fn cast<U: Scalar>(&self) -> BiasParams<U> {
        BiasParams {
            ts_weights: self.ts_weights.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }

    #[inline]
    fn weight(&self, delta: i64, cfg: &BiasConfig) -> T {
        self.ts_weights[bucketize(delta, cfg)]
    }
}

/// `Bias[i][j] = ts_weights[bucketize(ts_q[i] - ts_k[j])]`.
pub fn compute_bias<T: Scalar>(
    ts_q: &[i64],
    ts_k: &[i64],
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> RowMatrix<T> {
    let mut bias = RowMatrix::zeros(ts_q.len(), ts_k.len());
    for (i, &tq) in ts_q.iter().enumerate() {
        for (out, &tk) in bias.row_mut(i).iter_mut().zip(ts_k) {
            *out = params.weight(tq.saturating_sub(tk), cfg);
        }
    }
    bias
}

/// Q, K, V and per-token timestamps sharing one jagged structure.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvBatch<T> {
    pub q: JaggedTensor<T>,
    pub k: JaggedTensor<T>,
    pub v: JaggedTensor<T>,
    pub ts: JaggedIntSeries,
}

impl<T: Scalar> QkvBatch<T> {
    pub fn new(
        q: JaggedTensor<T>,
        k: JaggedTensor<T>,
        v: JaggedTensor<T>,
        ts: JaggedIntSeries,
    ) -> Result<Self, AttentionError> {
        for (what, t) in [("K", &k), ("V", &v)] {
            if t.offsets() != q.offsets() {
                return Err(AttentionError::OffsetMismatch { what });
            }
            if t.embed_dim() != q.embed_dim() {
                return Err(AttentionError::EmbedDimMismatch {
                    what,
                    expected: q.embed_dim(),
                    found: t.embed_dim(),
                });
            }
        }
        if ts.offsets() != q.offsets() {
            return Err(AttentionError::OffsetMismatch { what: "ts" });
        }
        Ok(Self { q, k, v, ts })
    }

    pub fn embed_dim(&self) -> usize {
        self.q.embed_dim()
    }

    pub fn offsets(&self) -> &[usize] {
        self.q.offsets()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.q.lengths()
    }

    pub fn total_tokens(&self) -> usize {
        self.q.total_tokens()
    }

    pub fn concat(parts: &[&QkvBatch<T>]) -> Result<Self, AttentionError> {
        let q = JaggedTensor::concat(&parts.iter().map(|p| &p.q).collect::<Vec<_>>())?;
        let k = JaggedTensor::concat(&parts.iter().map(|p| &p.k).collect::<Vec<_>>())?;
        let v = JaggedTensor::concat(&parts.iter().map(|p| &p.v).collect::<Vec<_>>())?;
        let ts = JaggedIntSeries::concat(&parts.iter().map(|p| &p.ts).collect::<Vec<_>>());
        Self::new(q, k, v, ts)
    }

    pub fn cast<U: Scalar>(&self) -> QkvBatch<U> {
        QkvBatch {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            ts: self.ts.clone(),
        }
    }
}

/// Everything the attention operator reads.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a, T> {
    pub batch: &'a QkvBatch<T>,
    pub params: &'a BiasParams<T>,
    pub cfg: &'a BiasConfig,
}

impl<'a, T: Scalar> AttentionInputs<'a, T> {
    pub fn new(
        batch: &'a QkvBatch<T>,
        params: &'a BiasParams<T>,
        cfg: &'a BiasConfig,
    ) -> Result<Self, AttentionError> {
        if params.ts_weights.len() != cfg.num_buckets {
            return Err(AttentionError::BiasLength {
                expected: cfg.num_buckets,
                found: params.ts_weights.len(),
            });
        }
        Ok(Self { batch, params, cfg })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients<T> {
    pub dq: JaggedTensor<T>,
    pub dk: JaggedTensor<T>,
    pub dv: JaggedTensor<T>,
    pub d_ts_weights: Vec<T>,
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Pre-activation scores `(Q Kᵀ + Bias) / sqrt(d)` for one sequence, dense L×L.
fn sequence_scores<T: Scalar>(
    q: &[T],
    k: &[T],
    ts: &[i64],
    dim: usize,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> RowMatrix<T> {
    let len = ts.len();
    let sqrt_d = T::of(dim as f64).sqrt();
    let mut scores = compute_bias(ts, ts, params, cfg);
    for i in 0..len {
        let qi = &q[i * dim..(i + 1) * dim];
        for (j, s) in scores.row_mut(i).iter_mut().enumerate() {
            let kj = &k[j * dim..(j + 1) * dim];
            *s = (dot(qi, kj) + *s) / sqrt_d;
        }
    }
    scores
}

/// Single-device HSTU attention over a whole jagged batch.
pub fn hstu_attention_reference<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
) -> Result<JaggedTensor<T>, AttentionError> {
    let batch = inputs.batch;
    let dim = batch.embed_dim();
    let mut out = Vec::with_capacity(batch.total_tokens() * dim);
    for b in 0..batch.q.num_sequences() {
        let ts = batch.ts.sequence(b);
        let len = ts.len();
        let scores = sequence_scores(
            batch.q.sequence(b),
            batch.k.sequence(b),
            ts,
            dim,
            inputs.params,
            inputs.cfg,
        );
        let v = batch.v.sequence(b);
        for i in 0..len {
            let mut row = vec![T::zero(); dim];
            // causal: keys j <= i only
            for j in 0..=i {
                let a = silu(scores.get(i, j));
                for (o, &vv) in row.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                    *o = *o + a * vv;
                }
            }
            out.extend(row);
        }
    }
    Ok(JaggedTensor::from_flat(
        dim,
        out,
        batch.offsets().to_vec(),
        batch.v.max_length(),
    )?)
}

/// Query rows of one chunk: contiguous global positions starting at `start`.
#[derive(Debug, Clone, Copy)]
pub struct QueryBlock<'a, T> {
    pub rows: &'a [T],
    pub timestamps: &'a [i64],
    pub sequence: usize,
    pub start: usize,
}

/// Key and value rows of one chunk.
#[derive(Debug, Clone, Copy)]
pub struct KeyValueBlock<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub timestamps: &'a [i64],
    pub sequence: usize,
    pub start: usize,
}

/// Contribution of one key/value chunk to the outputs of one query chunk.
///
/// Position pairs are allowed iff both chunks belong to the same sequence and
/// the key position does not exceed the query position. The full output of a
/// query chunk is the sum of these partials over every key chunk.
pub fn blockwise_partial<T: Scalar>(
    query: &QueryBlock<'_, T>,
    kv: &KeyValueBlock<'_, T>,
    dim: usize,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Result<RowMatrix<T>, AttentionError> {
    if dim == 0 {
        return Err(AttentionError::BlockShape("dim must be positive".into()));
    }
    let q_rows = query.timestamps.len();
    let k_rows = kv.timestamps.len();
    if query.rows.len() != q_rows * dim {
        return Err(AttentionError::BlockShape(format!(
            "query block has {} values for {q_rows} timestamps at dim {dim}",
            query.rows.len()
        )));
    }
    if kv.keys.len() != k_rows * dim || kv.values.len() != k_rows * dim {
        return Err(AttentionError::BlockShape(format!(
            "key block has {} key values and {} value values for {k_rows} rows at dim {dim}",
            kv.keys.len(),
            kv.values.len()
        )));
    }
    let mut out = RowMatrix::zeros(q_rows, dim);
    if query.sequence != kv.sequence || q_rows == 0 || k_rows == 0 {
        return Ok(out);
    }
    let q_last = query.start + q_rows - 1;
    if kv.start > q_last {
        return Ok(out);
    }
    let sqrt_d = T::of(dim as f64).sqrt();
    for i in 0..q_rows {
        let q_pos = query.start + i;
        if kv.start > q_pos {
            continue;
        }
        let visible = (q_pos - kv.start + 1).min(k_rows);
        let qi = &query.rows[i * dim..(i + 1) * dim];
        let tq = query.timestamps[i];
        let row = out.row_mut(i);
        for j in 0..visible {
            let kj = &kv.keys[j * dim..(j + 1) * dim];
            let bias = params.weight(tq.saturating_sub(kv.timestamps[j]), cfg);
            let a = silu((dot(qi, kj) + bias) / sqrt_d);
            for (o, &vv) in row.iter_mut().zip(&kv.values[j * dim..(j + 1) * dim]) {
                *o = *o + a * vv;
            }
        }
    }
    Ok(out)
}

/// Analytical gradients of the forward pass with respect to Q, K, V and the
/// bias weights. Bucket indices are treated as constants.
pub fn hstu_attention_backward<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    upstream: &JaggedTensor<T>,
) -> Result<AttentionGradients<T>, AttentionError> {
    let batch = inputs.batch;
    let dim = batch.embed_dim();
    if upstream.offsets() != batch.offsets() {
        return Err(AttentionError::OffsetMismatch { what: "upstream" });
    }
    if upstream.embed_dim() != dim {
        return Err(AttentionError::EmbedDimMismatch {
            what: "upstream",
            expected: dim,
            found: upstream.embed_dim(),
        });
    }
    let total = batch.total_tokens();
    let mut dq = vec![T::zero(); total * dim];
    let mut dk = vec![T::zero(); total * dim];
    let mut dv = vec![T::zero(); total * dim];
    let mut dw = vec![T::zero(); inputs.cfg.num_buckets];
    let sqrt_d = T::of(dim as f64).sqrt();

    for b in 0..batch.q.num_sequences() {
        let base = batch.offsets()[b];
        let ts = batch.ts.sequence(b);
        let q = batch.q.sequence(b);
        let k = batch.k.sequence(b);
        let v = batch.v.sequence(b);
        let g = upstream.sequence(b);
        let scores = sequence_scores(q, k, ts, dim, inputs.params, inputs.cfg);
        for i in 0..ts.len() {
            let gi = &g[i * dim..(i + 1) * dim];
            for j in 0..=i {
                let s = scores.get(i, j);
                let vj = &v[j * dim..(j + 1) * dim];
                // dV_j += A_ij g_i
                let a = silu(s);
                let dvj = &mut dv[(base + j) * dim..(base + j + 1) * dim];
                for (d, &gg) in dvj.iter_mut().zip(gi) {
                    *d = *d + a * gg;
                }
                // dS_ij = (g_i · v_j) SiLU'(S_ij); S is scaled by 1/sqrt(d)
                let ds = dot(gi, vj) * silu_grad(s) / sqrt_d;
                let qi = &q[i * dim..(i + 1) * dim];
                let kj = &k[j * dim..(j + 1) * dim];
                for (d, &kk) in dq[(base + i) * dim..(base + i + 1) * dim]
                    .iter_mut()
                    .zip(kj)
                {
                    *d = *d + ds * kk;
                }
                for (d, &qq) in dk[(base + j) * dim..(base + j + 1) * dim]
                    .iter_mut()
                    .zip(qi)
                {
                    *d = *d + ds * qq;
                }
                let bucket = bucketize(ts[i].saturating_sub(ts[j]), inputs.cfg);
                dw[bucket] = dw[bucket] + ds;
            }
        }
    }

    let offsets = batch.offsets().to_vec();
    let mk = |data: Vec<T>, like: &JaggedTensor<T>| {
        JaggedTensor::from_flat(dim, data, offsets.clone(), like.max_length())
    };
    Ok(AttentionGradients {
        dq: mk(dq, &batch.q)?,
        dk: mk(dk, &batch.k)?,
        dv: mk(dv, &batch.v)?,
        d_ts_weights: dw,
    })
}
