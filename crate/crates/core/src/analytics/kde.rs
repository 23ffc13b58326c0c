use super::AnalyticsError;

/// Evaluation points for a density series.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    /// `points` evenly spaced values from `min` to `max` inclusive.
    Range { min: f64, max: f64, points: usize },
    /// Data range padded by four bandwidths on each side.
    Auto { points: usize },
}

impl Grid {
    fn values(&self, data_min: f64, data_max: f64, bandwidth: f64) -> Vec<f64> {
        let (lo, hi, n) = match *self {
            Grid::Range { min, max, points } => (min, max, points),
            Grid::Auto { points } => (data_min - 4.0 * bandwidth, data_max + 4.0 * bandwidth, points),
        };
        if n < 2 {
            return vec![lo];
        }
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|i| lo + step * i as f64).collect()
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule: `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to
/// the standard deviation when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64, AnalyticsError> {
    if values.len() < 2 {
        return Err(AnalyticsError::TooFewPoints {
            needed: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(AnalyticsError::ZeroVariance);
    }
    let sd = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde_series(values: &[f64], grid: &Grid) -> Result<Vec<(f64, f64)>, AnalyticsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    let h = silverman_bandwidth(values)?;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .values(min, max, h)
        .into_iter()
        .map(|x| {
            let d: f64 = values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum();
            (x, d * norm)
        })
        .collect())
}
