//! Small shared statistics helpers. The quantile definition here is the one
//! used everywhere quantiles appear (biome outlier filter, baseline
//! percentile thresholds, percentile ranks) so the conventions cannot drift
//! apart between modules.

/// Linear-interpolation quantile of already-sorted values, `q` in [0, 1].
///
/// Index convention: position `(n - 1) * q` interpolated between the two
/// surrounding order statistics (the default of mainstream statistics
/// software).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level out of [0,1]");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Convenience wrapper sorting a copy first. NaNs are rejected by callers.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    quantile_sorted(&v, q)
}

/// Percentile rank in [0, 100] of `x` within `sorted`, midrank convention:
/// `100 * (count_less + 0.5 * count_equal) / n`. All-equal inputs therefore
/// rank at 50.
pub fn percentile_rank_sorted(sorted: &[f64], x: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile rank over empty slice");
    let less = sorted.partition_point(|&v| v < x);
    let le = sorted.partition_point(|&v| v <= x);
    let equal = le - less;
    100.0 * (less as f64 + 0.5 * equal as f64) / n as f64
}

pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of empty slice");
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    assert!(n >= 1, "std of empty slice");
    if n == 1 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Pearson correlation; returns `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson length mismatch");
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let _ = n;
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Streaming mean/variance accumulator (Welford). Used to cross-check the
/// two-pass aggregation in the evaluation harness.
#[derive(Debug, Clone, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation (n − 1); 0 when fewer than two points.
    pub fn sample_std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }
}
