//! Small statistical helpers: moments, batch means and KS distances.

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, v)
}

/// Standard error of a ratio estimator `sum(num) / sum(den)` from
/// per-batch sums: the spread of the batch ratios divided by `sqrt(B)`.
/// Batches with zero denominator are skipped.
pub fn ratio_batch_se(num: &[f64], den: &[f64]) -> f64 {
    let ratios: Vec<f64> = num
        .iter()
        .zip(den)
        .filter(|(_, d)| **d > 0.0)
        .map(|(n, d)| n / d)
        .collect();
    if ratios.len() < 2 {
        return f64::NAN;
    }
    let (_, v) = mean_var(&ratios);
    (v / ratios.len() as f64).sqrt()
}

/// Standard error of a mean of correlated values by splitting the sequence
/// into `batches` contiguous blocks.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    if batches < 2 || n < batches {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            let (lo, hi) = (b * n / batches, (b + 1) * n / batches);
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let (_, v) = mean_var(&means);
    (v / batches as f64).sqrt()
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and
/// a continuous CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample z-score `(a - b) / sqrt(se_a^2 + se_b^2)`.
pub fn z_score(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    (a - b) / (se_a * se_a + se_b * se_b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_of_uniform_grid_is_small() {
        let xs: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        assert!((ks_distance(&xs, |x| x) - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn batch_se_of_constant_blocks() {
        let xs: Vec<f64> = (0..100).map(|k| if k < 50 { 1.0 } else { 3.0 }).collect();
        // Two batch means 1 and 3: variance 2, se = 1.
        assert!((batch_means_se(&xs, 2) - 1.0).abs() < 1e-12);
        assert!((ratio_batch_se(&[1.0, 3.0], &[1.0, 1.0]) - 1.0).abs() < 1e-12);
    }
}
