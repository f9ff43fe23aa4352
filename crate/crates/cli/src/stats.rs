use serde::Serialize;

/// Ensemble statistics of one scalar; `ci95` is the normal interval for the mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub ci95: [f64; 2],
}

impl Summary {
    /// `None` for an empty slice; non-finite values are dropped.
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std_dev = var.sqrt();
        let half = 1.959964 * std_dev / (n as f64).sqrt();
        Some(Summary {
            n,
            mean,
            std_dev,
            q05: quantile(&v, 0.05),
            median: quantile(&v, 0.5),
            q95: quantile(&v, 0.95),
            ci95: [mean - half, mean + half],
        })
    }

    pub fn ci_width(&self) -> f64 {
        self.ci95[1] - self.ci95[0]
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = x[..n].iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Share of members that must succeed for an ensemble to count.
pub const QUORUM: f64 = 0.8;

pub fn has_quorum(succeeded: usize, total: usize) -> bool {
    total > 0 && succeeded as f64 >= QUORUM * total as f64
}
