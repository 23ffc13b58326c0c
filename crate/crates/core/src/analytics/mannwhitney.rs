//! Two-sample Mann–Whitney U test.
//!
//! U is computed from midranks of the pooled sample, so ties count one half.
//! The z score uses the tie-corrected variance without continuity correction.
//! For samples of at most [`EXACT_LIMIT`] each and no ties, the two-sided p
//! value comes from the exact null distribution of U instead.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::AnalyticsError;

pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTestResult {
    /// U of the first sample: pairs with a > b, ties counting one half.
    pub u_statistic: f64,
    pub z_score: f64,
    pub p_value: f64,
    /// |z| / sqrt(n1 + n2)
    pub effect_size_r: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: PValueMethod,
}

/// Midranks (1-based) of `values`, ties sharing their average rank, together
/// with the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j averaged
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

pub fn mann_whitney(sample_a: &[f64], sample_b: &[f64]) -> Result<RankTestResult, AnalyticsError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(AnalyticsError::Empty("mann_whitney sample"));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    let n1 = sample_a.len();
    let n2 = sample_b.len();
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n1].iter().sum();
    let u = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;

    let n = (n1 + n2) as f64;
    let prod = (n1 * n2) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let variance = prod / 12.0 * ((n + 1.0) - tie_term);
    let z = if variance > 0.0 {
        (u - prod / 2.0) / variance.sqrt()
    } else {
        0.0
    };

    let (p_value, method) = if ties.is_empty() && n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        (exact_two_sided(u as usize, n1, n2), PValueMethod::Exact)
    } else {
        (erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0), PValueMethod::Normal)
    };

    Ok(RankTestResult {
        u_statistic: u,
        z_score: z,
        p_value,
        effect_size_r: z.abs() / n.sqrt(),
        n1,
        n2,
        method,
    })
}

/// Number of orderings of `n1` a's and `n2` b's giving each U value.
pub fn exact_u_counts(n1: usize, n2: usize) -> Vec<u64> {
    // dist[j] holds the distribution for the current i and j b's
    let max_u = n1 * n2;
    let mut prev: Vec<Vec<u64>> = (0..=n2)
        .map(|_| {
            let mut d = vec![0u64; max_u + 1];
            d[0] = 1;
            d
        })
        .collect();
    for i in 1..=n1 {
        let mut cur: Vec<Vec<u64>> = vec![vec![0u64; max_u + 1]; n2 + 1];
        cur[0][0] = 1;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest element is an a: it beats all j b's
                let from_a = if u >= j { prev[j][u - j] } else { 0 };
                let from_b = cur[j - 1][u];
                cur[j][u] = from_a + from_b;
            }
        }
        prev = cur;
    }
    prev.swap_remove(n2)
}

fn exact_two_sided(u: usize, n1: usize, n2: usize) -> f64 {
    let counts = exact_u_counts(n1, n2);
    let total: u64 = counts.iter().sum();
    let le: u64 = counts[..=u].iter().sum();
    let ge: u64 = counts[u..].iter().sum();
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}
