//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use jagged_cp::attention::{
    blockwise_partial, hstu_attention_backward, AttentionInputs, BiasConfig, BiasParams,
    KeyValueBlock, QkvBatch, QueryBlock,
};
use jagged_cp::engine::{
    build_shard_plan, flops_per_rank, plan_for_batches, redistribute, BalanceMode, Protocol,
    Schedule,
};
use jagged_cp::harness::{modeled_peak_bytes, sweep_max_tokens, ExperimentConfig};
use jagged_cp::jagged::JaggedTensor;
use jagged_cp::scalar::DType;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_lengths(r: &mut ChaCha8Rng, count: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..count).map(|_| r.random_range(lo..=hi)).collect()
}

fn cp_correctness() -> Outcome {
    const CONFIGS: usize = 200;
    const F64_ABS_TOL: f64 = 1e-10;
    const F32_REL_TOL: f64 = 1e-4;
    const TIME_LIMIT: Duration = Duration::from_secs(120);

    let start = Instant::now();
    let mut r = rng(0x5eed_0001);
    let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for i in 0..CONFIGS {
        let cp = [1, 2, 4, 8][i % 4];
        let protocol = ALL_PROTOCOLS[(i / 4) % 2];
        let mode = ALL_MODES[(i / 8) % 2];
        let use_f64 = (i / 16) % 2 == 0;
        let schedule = if i % 3 == 0 {
            Schedule::Concurrent
        } else {
            Schedule::Sequential
        };
        let d = [8, 32][r.random_range(0..2)];
        let batches: Vec<QkvBatch<f64>> = (0..cp)
            .map(|_| {
                let b = r.random_range(1..=4);
                let lengths = random_lengths(&mut r, b, 0, 128);
                random_batch(&mut r, &lengths, d)
            })
            .collect();
        let cfg = BiasConfig::new(r.random_range(1..=40)).unwrap();
        let params = random_params(&mut r, &cfg, 0.5);
        let want: Vec<Vec<f64>> = batches
            .iter()
            .map(|b| oracle_batch(b, params.ts_weights()))
            .collect();

        if use_f64 {
            let got = pipeline(&batches, protocol, mode, schedule, &params, &cfg);
            for (g, (w, b)) in got.iter().zip(want.iter().zip(&batches)) {
                assert_eq!(g.offsets(), b.offsets());
                let e = max_abs_diff(g.values().as_slice(), w);
                worst_abs = worst_abs.max(e);
                if e > F64_ABS_TOL {
                    failures.push(format!("config {i} (cp={cp} {protocol} {mode} f64): {e:e}"));
                }
            }
        } else {
            let b32: Vec<QkvBatch<f32>> = batches.iter().map(QkvBatch::cast).collect();
            let p32: BiasParams<f32> = params.cast();
            let got = pipeline(&b32, protocol, mode, schedule, &p32, &cfg);
            for (g, w) in got.iter().zip(&want) {
                let e = max_row_rel_error(g.values().as_slice(), w, d);
                worst_rel = worst_rel.max(e);
                if e > F32_REL_TOL {
                    failures.push(format!("config {i} (cp={cp} {protocol} {mode} f32): {e:e}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed <= TIME_LIMIT;
    outcome(
        pass,
        format!(
            "{CONFIGS} configs, worst f64 abs {worst_abs:.2e} (tol {F64_ABS_TOL:e}), worst f32 rel \
             {worst_rel:.2e} (tol {F32_REL_TOL:e}), {:.1}s (limit {}s){}",
            elapsed.as_secs_f64(),
            TIME_LIMIT.as_secs(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

fn peak_ratio(batches: &[QkvBatch<f64>]) -> f64 {
    let plan = plan_for_batches(batches, batches.len(), BalanceMode::BalancedMinichunk).unwrap();
    let ag = redistribute(Protocol::AllgatherSplit, batches, &plan)
        .unwrap()
        .1;
    let a2a = redistribute(Protocol::Alltoall, batches, &plan).unwrap().1;
    1.0 - a2a.max_peak() as f64 / ag.max_peak() as f64
}

/// `tokens` split into `parts` random sequence lengths (zeros allowed).
fn random_partition(r: &mut ChaCha8Rng, tokens: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (1..parts).map(|_| r.random_range(0..=tokens)).collect();
    cuts.push(0);
    cuts.push(tokens);
    cuts.sort_unstable();
    cuts.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Per-rank batches carry equal token counts, as in a token-packed data loader.
/// With unequal counts the AllToAll peak is bounded below by the largest local
/// batch, so the ratio degrades to `1 - max_r tokens_r / total`.
fn memory_reduction() -> Outcome {
    const TRIALS: u64 = 20;
    const TOKENS_PER_RANK: [usize; 3] = [256, 512, 1000];
    let thresholds = [(2usize, 0.45), (4, 0.60)];

    let mut parts = Vec::new();
    let mut pass = true;
    for (cp, threshold) in thresholds {
        let mut worst = f64::INFINITY;
        for t in 0..TRIALS {
            let mut r = rng(0x5eed_0200 + t);
            let tokens = TOKENS_PER_RANK[t as usize % TOKENS_PER_RANK.len()];
            let batches: Vec<_> = (0..cp)
                .map(|_| {
                    let b = r.random_range(1..=6);
                    let lengths = random_partition(&mut r, tokens, b);
                    random_batch(&mut r, &lengths, 16)
                })
                .collect();
            worst = worst.min(peak_ratio(&batches));
        }
        pass &= worst >= threshold;
        parts.push(format!(
            "cp={cp} min ratio {worst:.4} (need >= {threshold})"
        ));
    }
    outcome(
        pass,
        format!(
            "{TRIALS} token-balanced batches per cp, {TOKENS_PER_RANK:?} tokens/rank; {}",
            parts.join(", ")
        ),
    )
}

fn communication_volume() -> Outcome {
    const TRIALS: u64 = 20;
    const SLACK: f64 = 1.10;
    const MIN_TOKENS_PER_RANK: usize = 64;

    let mut parts = Vec::new();
    let mut pass = true;
    for cp in [2usize, 4, 8] {
        let mut worst = 0.0f64;
        for t in 0..TRIALS {
            let mut r = rng(0x5eed_0300 + t);
            let batches: Vec<_> = (0..cp)
                .map(|_| {
                    let b = r.random_range(1..=4);
                    let mut lengths = random_lengths(&mut r, b, 1, 128);
                    while lengths.iter().sum::<usize>() < MIN_TOKENS_PER_RANK {
                        lengths.push(r.random_range(1..=128));
                    }
                    random_batch(&mut r, &lengths, 8)
                })
                .collect();
            let plan = plan_for_batches(&batches, cp, BalanceMode::BalancedMinichunk).unwrap();
            let ag = redistribute(Protocol::AllgatherSplit, &batches, &plan)
                .unwrap()
                .1;
            let a2a = redistribute(Protocol::Alltoall, &batches, &plan).unwrap().1;
            for (g, a) in ag.ranks.iter().zip(&a2a.ranks) {
                let bound = g.bytes_received as f64 / cp as f64;
                worst = worst.max(a.bytes_received as f64 / bound);
            }
        }
        pass &= worst <= SLACK;
        parts.push(format!("cp={cp} worst a2a/(ag/cp) {worst:.4}"));
    }
    outcome(
        pass,
        format!(
            "{TRIALS} batches per cp, limit {SLACK}; {}",
            parts.join(", ")
        ),
    )
}

fn load_balance() -> Outcome {
    const NAIVE_TOL: f64 = 0.02;

    let mut r = rng(0x5eed_0400);
    let mut balanced_ok = true;
    let mut balanced_cases = 0;
    for cp in [1usize, 2, 4, 8] {
        for _ in 0..25 {
            let lengths: Vec<Vec<usize>> = (0..cp)
                .map(|_| {
                    let b = r.random_range(1..=4);
                    (0..b).map(|_| 2 * cp * r.random_range(1..=64)).collect()
                })
                .collect();
            let plan = build_shard_plan(&lengths, cp, BalanceMode::BalancedMinichunk).unwrap();
            balanced_ok &= flops_per_rank(&plan).max_over_mean == 1.0;
            balanced_cases += 1;
        }
    }

    let mut worst_dev = 0.0f64;
    for cp in [2usize, 4, 8] {
        let expected = (2 * cp - 1) as f64 / cp as f64;
        for len in [512, 777, 1024, 4096, r.random_range(512..=20_000)] {
            let mut lengths = vec![Vec::new(); cp];
            lengths[0].push(len);
            let plan = build_shard_plan(&lengths, cp, BalanceMode::NaiveContiguous).unwrap();
            let got = flops_per_rank(&plan).max_over_mean;
            worst_dev = worst_dev.max((got - expected).abs() / expected);
        }
    }
    outcome(
        balanced_ok && worst_dev <= NAIVE_TOL,
        format!(
            "balanced max/mean == 1.0 in {balanced_cases} cases: {balanced_ok}; naive worst \
             relative deviation from (2cp-1)/cp {worst_dev:.4} (tol {NAIVE_TOL})"
        ),
    )
}

/// Random cut points splitting `0..len` into contiguous blocks.
fn random_blocks(r: &mut ChaCha8Rng, len: usize) -> Vec<(usize, usize)> {
    let mut cuts: Vec<usize> = (0..r.random_range(0..=6))
        .map(|_| r.random_range(0..=len))
        .collect();
    cuts.push(0);
    cuts.push(len);
    cuts.sort_unstable();
    cuts.dedup();
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

fn block_additivity() -> Outcome {
    const CASES: usize = 100;
    const TOL: f64 = 1e-12;

    let mut r = rng(0x5eed_0500);
    let mut worst = 0.0f64;
    for _ in 0..CASES {
        let len = r.random_range(1..=64);
        let d = r.random_range(1..=16);
        let q = normal_vec(&mut r, len * d);
        let k = normal_vec(&mut r, len * d);
        let v = normal_vec(&mut r, len * d);
        let ts = random_timestamps(&mut r, len);
        let cfg = BiasConfig::new(r.random_range(1..=24)).unwrap();
        let params = random_params(&mut r, &cfg, 0.5);
        let want = oracle_sequence(&q, &k, &v, &ts, d, params.ts_weights());

        let q_blocks = random_blocks(&mut r, len);
        let k_blocks = random_blocks(&mut r, len);
        let mut got = vec![0.0; len * d];
        for &(qa, qb) in &q_blocks {
            let query = QueryBlock {
                rows: &q[qa * d..qb * d],
                timestamps: &ts[qa..qb],
                sequence: 3,
                start: qa,
            };
            for &(ka, kb) in &k_blocks {
                let kv = KeyValueBlock {
                    keys: &k[ka * d..kb * d],
                    values: &v[ka * d..kb * d],
                    timestamps: &ts[ka..kb],
                    sequence: 3,
                    start: ka,
                };
                let p = blockwise_partial(&query, &kv, d, &params, &cfg).unwrap();
                for (o, x) in got[qa * d..qb * d].iter_mut().zip(p.as_slice()) {
                    *o += x;
                }
                // the same keys under another sequence id contribute nothing
                let foreign = KeyValueBlock { sequence: 4, ..kv };
                let p = blockwise_partial(&query, &foreign, d, &params, &cfg).unwrap();
                assert!(p.as_slice().iter().all(|&x| x == 0.0));
            }
        }
        worst = worst.max(max_abs_diff(&got, &want));
    }
    outcome(
        worst <= TOL,
        format!("{CASES} sequences, worst abs error {worst:.2e} (tol {TOL:e})"),
    )
}

fn fd_loss(batch: &QkvBatch<f64>, weights: &[f64], upstream: &[f64]) -> f64 {
    oracle_batch(batch, weights)
        .iter()
        .zip(upstream)
        .map(|(o, g)| o * g)
        .sum()
}

fn perturbed(batch: &QkvBatch<f64>, which: usize, idx: usize, delta: f64) -> QkvBatch<f64> {
    let mut b = batch.clone();
    let t = match which {
        0 => &b.q,
        1 => &b.k,
        _ => &b.v,
    };
    let mut data = t.values().as_slice().to_vec();
    data[idx] += delta;
    let t =
        JaggedTensor::from_flat(t.embed_dim(), data, t.offsets().to_vec(), t.max_length()).unwrap();
    match which {
        0 => b.q = t,
        1 => b.k = t,
        _ => b.v = t,
    }
    b
}

fn gradient_check() -> Outcome {
    const INSTANCES: usize = 50;
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    let mut r = rng(0x5eed_0600);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..INSTANCES {
        let d = r.random_range(1..=6);
        let b = r.random_range(1..=3);
        let lengths = random_lengths(&mut r, b, 1, 8);
        let batch = random_batch(&mut r, &lengths, d);
        let cfg = BiasConfig::new(r.random_range(1..=10)).unwrap();
        let params = random_params(&mut r, &cfg, 0.5);
        let n = batch.total_tokens() * d;
        let g = normal_vec(&mut r, n);
        let upstream =
            JaggedTensor::from_flat(d, g.clone(), batch.offsets().to_vec(), batch.q.max_length())
                .unwrap();
        let grads = hstu_attention_backward(
            &AttentionInputs::new(&batch, &params, &cfg).unwrap(),
            &upstream,
        )
        .unwrap();

        let analytic = [&grads.dq, &grads.dk, &grads.dv];
        for (which, an) in analytic.iter().enumerate() {
            for idx in 0..n {
                let plus = fd_loss(
                    &perturbed(&batch, which, idx, STEP),
                    params.ts_weights(),
                    &g,
                );
                let minus = fd_loss(
                    &perturbed(&batch, which, idx, -STEP),
                    params.ts_weights(),
                    &g,
                );
                let fd = (plus - minus) / (2.0 * STEP);
                worst = worst.max((fd - an.values().as_slice()[idx]).abs());
                checked += 1;
            }
        }
        for idx in 0..cfg.num_buckets {
            let mut w = params.ts_weights().to_vec();
            w[idx] += STEP;
            let plus = fd_loss(&batch, &w, &g);
            w[idx] -= 2.0 * STEP;
            let minus = fd_loss(&batch, &w, &g);
            let fd = (plus - minus) / (2.0 * STEP);
            worst = worst.max((fd - grads.d_ts_weights[idx]).abs());
            checked += 1;
        }
    }
    outcome(
        worst <= TOL,
        format!(
            "{INSTANCES} instances, {checked} partials incl. ts_weights, step {STEP:e}, worst \
             abs diff {worst:.2e} (tol {TOL:e})"
        ),
    )
}

fn sweep_trend() -> Outcome {
    const BUDGET: u64 = 64 << 20;
    const MIN_GAIN: f64 = 4.0;
    let template = ExperimentConfig {
        embed_dim: 512,
        dtype: DType::F32,
        ..Default::default()
    };
    let s = sweep_max_tokens(BUDGET, &[1, 2, 4, 8], &template).unwrap();
    let lengths: Vec<usize> = s.rows.iter().map(|r| r.max_sequence_length).collect();
    let monotone = lengths.windows(2).all(|w| w[0] <= w[1]);
    let gain = lengths[3] as f64 / lengths[0] as f64;

    // token slabs must dominate the modeled footprint at cp=1
    let (total, resident) = modeled_peak_bytes(
        lengths[0],
        1,
        512,
        DType::F32,
        BalanceMode::BalancedMinichunk,
    )
    .unwrap();
    let slab = 6 * 512 * 4 * resident as u64;
    let slab_dominated = 2 * slab >= total;
    outcome(
        monotone && gain >= MIN_GAIN && slab_dominated,
        format!(
            "budget {BUDGET} B, d=512 f32, max lengths {lengths:?}, cp8/cp1 = {gain:.2} (need >= \
             {MIN_GAIN}), slab share at cp1 {:.2}",
            slab as f64 / total as f64
        ),
    )
}

fn cli_output(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_jagged-cp"))
        .args(args)
        .output()
        .expect("run cli");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn determinism() -> Outcome {
    let invocations: [&[&str]; 4] = [
        &[
            "bench",
            "--cp",
            "4",
            "--protocol",
            "allgather_split",
            "--seed",
            "7",
            "--output",
            "json",
        ],
        &[
            "bench",
            "--cp",
            "8",
            "--protocol",
            "alltoall",
            "--dtype",
            "f32",
            "--length-dist",
            "lognormal",
            "--seed",
            "11",
            "--output",
            "json",
        ],
        &[
            "bench",
            "--cp",
            "2",
            "--balance-mode",
            "naive",
            "--seed",
            "3",
            "--output",
            "csv",
        ],
        &["verify", "--cp", "1,2,4", "--seed", "5"],
    ];
    let mut runs = 0;
    let mut mismatched = Vec::new();
    for args in invocations {
        let mut outputs = Vec::new();
        for schedule in ["sequential", "concurrent"] {
            for _ in 0..2 {
                let mut a = args.to_vec();
                a.extend(["--schedule", schedule]);
                outputs.push(cli_output(&a));
                runs += 1;
            }
        }
        if outputs.iter().any(|o| o != &outputs[0]) {
            mismatched.push(args.join(" "));
        }
    }
    let sweep: Vec<_> = (0..2)
        .map(|_| {
            cli_output(&[
                "sweep", "--budget", "16777216", "--seed", "7", "--output", "json",
            ])
        })
        .collect();
    runs += 2;
    if sweep[0] != sweep[1] {
        mismatched.push("sweep".into());
    }
    outcome(
        mismatched.is_empty(),
        format!(
            "{runs} CLI runs over both schedules, bitwise identical per invocation{}",
            if mismatched.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", mismatched.join(" | "))
            }
        ),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 8] = [
        ("CP correctness vs triple-loop oracle", cp_correctness),
        (
            "peak memory reduction AllToAll vs AllGather",
            memory_reduction,
        ),
        ("AllToAll communication volume", communication_volume),
        ("load balancing", load_balance),
        ("block additivity", block_additivity),
        ("gradient check", gradient_check),
        ("max sequence length vs CP size", sweep_trend),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
