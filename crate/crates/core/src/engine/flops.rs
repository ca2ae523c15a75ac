use serde::{Deserialize, Serialize};

use super::plan::ShardPlan;

/// Causal-mask work per rank, counted as allowed (query, key) score pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_rank: Vec<u64>,
    pub total: u64,
    /// `max(per_rank) / mean(per_rank)`; 1.0 for an empty batch.
    pub max_over_mean: f64,
}

/// Pairs `(i, j)` with `j <= i` for query positions `start..end`:
/// `sum_{i=start}^{end-1} (i + 1)`.
fn causal_pairs(start: u64, end: u64) -> u64 {
    (end * (end + 1) - start * (start + 1)) / 2
}

pub fn flops_per_rank(plan: &ShardPlan) -> FlopsReport {
    let per_rank: Vec<u64> = (0..plan.cp_size())
        .map(|r| {
            plan.rank_spans(r)
                .iter()
                .map(|s| causal_pairs(s.start as u64, s.end as u64))
                .sum()
        })
        .collect();
    let total: u64 = per_rank.iter().sum();
    let max = per_rank.iter().copied().max().unwrap_or(0);
    let max_over_mean = if total == 0 {
        1.0
    } else {
        (max as f64 * plan.cp_size() as f64) / total as f64
    };
    FlopsReport {
        per_rank,
        total,
        max_over_mean,
    }
}
