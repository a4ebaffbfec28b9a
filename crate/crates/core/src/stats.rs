//! Order statistics over small windows.

/// Quantile by linear interpolation between the closest order statistics
/// (the R "type 7" rule: position `q * (n - 1)` in the sorted sample).
///
/// Returns `None` for an empty sample.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, q))
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Interquartile range `Q75 - Q25` under the same interpolation rule.
pub fn iqr(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25))
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quartiles() {
        let xs = [0.5, 0.7, 0.9];
        assert!((quantile(&xs, 0.25).unwrap() - 0.6).abs() < 1e-12);
        assert!((quantile(&xs, 0.75).unwrap() - 0.8).abs() < 1e-12);
        assert!((median(&xs).unwrap() - 0.7).abs() < 1e-12);
        // 1..=4: Q25 at position 0.75 -> 1.75
        assert!((quantile(&[4.0, 1.0, 3.0, 2.0], 0.25).unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_samples() {
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(iqr(&[0.4]), Some(0.0));
        assert_eq!(sample_variance(&[1.0]), 0.0);
    }
}
