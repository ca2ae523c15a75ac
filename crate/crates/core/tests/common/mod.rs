//! Oracles and fixtures shared by the integration tests.
//!
//! The oracles here deliberately avoid the library's attention code: plain
//! nested loops over raw `f64` slices, with their own SiLU and bucketing.

#![allow(dead_code)]

use jagged_cp::attention::{BiasConfig, BiasParams, QkvBatch};
use jagged_cp::engine::{plan_for_batches, run_pipeline, BalanceMode, Protocol, Schedule};
use jagged_cp::jagged::{JaggedIntSeries, JaggedTensor};
use jagged_cp::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn oracle_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn oracle_bucket(delta: i64, num_buckets: usize) -> usize {
    let d = delta.max(0) as f64;
    let b = (1.0 + d).ln().floor() as usize;
    b.min(num_buckets - 1)
}

/// One sequence, row-major `len x d` inputs:
/// `out[i] = sum_{j <= i} silu((q_i . k_j + w[bucket(ts_i - ts_j)]) / sqrt(d)) * v_j`.
pub fn oracle_sequence(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ts: &[i64],
    d: usize,
    weights: &[f64],
) -> Vec<f64> {
    let len = ts.len();
    let mut out = vec![0.0; len * d];
    for i in 0..len {
        for j in 0..len {
            if j > i {
                continue;
            }
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            s += weights[oracle_bucket(ts[i] - ts[j], weights.len())];
            let a = oracle_silu(s / (d as f64).sqrt());
            for c in 0..d {
                out[i * d + c] += a * v[j * d + c];
            }
        }
    }
    out
}

/// Flat row-major output for a whole batch.
pub fn oracle_batch(batch: &QkvBatch<f64>, weights: &[f64]) -> Vec<f64> {
    let d = batch.embed_dim();
    let offs = batch.offsets();
    let (q, k, v) = (
        batch.q.values().as_slice(),
        batch.k.values().as_slice(),
        batch.v.values().as_slice(),
    );
    let ts = batch.ts.values();
    let mut out = Vec::with_capacity(q.len());
    for w in offs.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.extend(oracle_sequence(
            &q[a * d..b * d],
            &k[a * d..b * d],
            &v[a * d..b * d],
            &ts[a..b],
            d,
            weights,
        ));
    }
    out
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_timestamps(rng: &mut ChaCha8Rng, len: usize) -> Vec<i64> {
    let mut t = rng.random_range(0..1_000_000i64);
    (0..len)
        .map(|_| {
            let now = t;
            t += (rng.random::<f64>() * 14.0).exp().round().max(1.0) as i64;
            now
        })
        .collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, lengths: &[usize], d: usize) -> QkvBatch<f64> {
    let n: usize = lengths.iter().sum();
    let mut offsets = vec![0];
    for l in lengths {
        offsets.push(offsets.last().unwrap() + l);
    }
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let t = |rng: &mut ChaCha8Rng| {
        JaggedTensor::from_flat(d, normal_vec(rng, n * d), offsets.clone(), max_len).unwrap()
    };
    let (q, k, v) = (t(rng), t(rng), t(rng));
    let ts = lengths
        .iter()
        .flat_map(|&l| random_timestamps(rng, l))
        .collect();
    QkvBatch::new(q, k, v, JaggedIntSeries::new(ts, offsets).unwrap()).unwrap()
}

pub fn random_params(rng: &mut ChaCha8Rng, cfg: &BiasConfig, scale: f64) -> BiasParams<f64> {
    let w = normal_vec(rng, cfg.num_buckets)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    BiasParams::new(w, cfg).unwrap()
}

/// Runs the CP pipeline and returns each rank's output.
pub fn pipeline<T: Scalar>(
    batches: &[QkvBatch<T>],
    protocol: Protocol,
    mode: BalanceMode,
    schedule: Schedule,
    params: &BiasParams<T>,
    cfg: &BiasConfig,
) -> Vec<JaggedTensor<T>> {
    let plan = plan_for_batches(batches, batches.len(), mode).unwrap();
    run_pipeline(batches, &plan, protocol, schedule, params, cfg)
        .unwrap()
        .outputs
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest per-row `max|got - want| / max|want|`, with `want` in f64.
pub fn max_row_rel_error<T: Scalar>(got: &[T], want: &[f64], d: usize) -> f64 {
    assert_eq!(got.len(), want.len());
    got.chunks(d)
        .zip(want.chunks(d))
        .map(|(g, w)| {
            let err = g
                .iter()
                .zip(w)
                .map(|(x, y)| (x.as_f64() - y).abs())
                .fold(0.0, f64::max);
            let scale = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if err == 0.0 {
                0.0
            } else {
                err / scale.max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max)
}

pub const ALL_PROTOCOLS: [Protocol; 2] = [Protocol::AllgatherSplit, Protocol::Alltoall];
pub const ALL_MODES: [BalanceMode; 2] =
    [BalanceMode::NaiveContiguous, BalanceMode::BalancedMinichunk];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
