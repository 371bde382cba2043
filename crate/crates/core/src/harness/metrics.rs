use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("baseline throughput is zero")]
    ZeroBaseline,
    #[error("test latency is zero")]
    ZeroTestLatency,
}

/// Test throughput relative to the original; below 1.0 is a slowdown.
pub fn throughput_speedup(test: f64, original: f64) -> Result<f64, MetricError> {
    if original <= 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok(test / original)
}

/// Original latency over test latency; above 1.0 means the test is faster.
pub fn latency_speedup(original: f64, test: f64) -> Result<f64, MetricError> {
    if test <= 0.0 {
        return Err(MetricError::ZeroTestLatency);
    }
    Ok(original / test)
}

/// Median of the values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Nearest-rank percentile of an ascending slice, `p` in `0..=100`.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
