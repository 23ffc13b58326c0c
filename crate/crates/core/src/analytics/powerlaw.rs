use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

/// `f(r) = coefficient * r^exponent`, fitted in log-log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub coefficient: f64,
    pub exponent: f64,
    pub r_squared: f64,
    /// Inclusive rank interval the fit used.
    pub fit_range: (u64, u64),
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, rank: f64) -> f64 {
        self.coefficient * rank.powf(self.exponent)
    }
}

/// Ranks to include; `None` means every rank with positive frequency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitRange {
    pub top_k: Option<u64>,
}

/// Ordinary least squares of `ln f` on `ln r`.
///
/// Zero frequencies are dropped before fitting. When every `ln f` is equal the
/// fit is exact and `r_squared` is 1 by convention.
pub fn fit_power_law(rank_frequency: &[(u64, f64)], range: FitRange) -> Result<PowerLawFit, AnalyticsError> {
    let pts: Vec<(f64, f64)> = rank_frequency
        .iter()
        .filter(|(r, f)| *r >= 1 && *f > 0.0 && range.top_k.is_none_or(|k| *r <= k))
        .map(|&(r, f)| ((r as f64).ln(), f.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(AnalyticsError::TooFewPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalyticsError::Degenerate("all ranks are equal"));
    }
    let flat = pts.iter().all(|p| p.1 == pts[0].1);
    let (slope, intercept, r_squared) = if flat {
        (0.0, pts[0].1, 1.0)
    } else {
        let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
        let slope = sxy / sxx;
        let intercept = mean_y - slope * mean_x;
        let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
        let ss_res: f64 = pts.iter().map(|p| (p.1 - (intercept + slope * p.0)).powi(2)).sum();
        (slope, intercept, 1.0 - ss_res / ss_tot)
    };

    let ranks = rank_frequency
        .iter()
        .filter(|(r, f)| *r >= 1 && *f > 0.0 && range.top_k.is_none_or(|k| *r <= k))
        .map(|(r, _)| *r);
    let lo = ranks.clone().min().unwrap_or(0);
    let hi = ranks.max().unwrap_or(0);
    Ok(PowerLawFit {
        coefficient: intercept.exp(),
        exponent: slope,
        r_squared,
        fit_range: (lo, hi),
        points: pts.len(),
    })
}

/// Items sorted by descending count (ties by key), ranked from 1.
pub fn rank_frequency(counts: &BTreeMap<String, u64>) -> Vec<(u64, String, u64)> {
    let mut items: Vec<(&String, u64)> = counts.iter().map(|(k, &v)| (k, v)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items
        .into_iter()
        .enumerate()
        .map(|(i, (k, v))| (i as u64 + 1, k.clone(), v))
        .collect()
}
