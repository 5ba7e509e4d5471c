//! Species richness estimation from abundance counts and the biome-level
//! outlier filter.
//!
//! Richness is estimated with the bias-corrected Chao1 estimator and the
//! standard analytic extrapolation to larger sequencing depth. The filter
//! removes, within each biome, samples whose estimated richness exceeds the
//! biome median by more than five times the interquartile range. The filter
//! is one pass: quantiles are not re-estimated after removal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Per-OTU read counts for one sample. All counts are positive; `n` is the
/// total read count and `s_obs` the number of observed OTUs.
#[derive(Debug, Clone)]
pub struct AbundanceVector {
    counts: Vec<u64>,
}

impl AbundanceVector {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Domain("abundance vector must be non-empty".into()));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Validation(
                "abundance counts must all be positive".into(),
            ));
        }
        Ok(AbundanceVector { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Total reads.
    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Observed OTU count.
    pub fn s_obs(&self) -> u64 {
        self.counts.len() as u64
    }

    /// Singleton count (OTUs seen exactly once).
    pub fn f1(&self) -> u64 {
        self.counts.iter().filter(|&&c| c == 1).count() as u64
    }

    /// Doubleton count (OTUs seen exactly twice).
    pub fn f2(&self) -> u64 {
        self.counts.iter().filter(|&&c| c == 2).count() as u64
    }
}

/// Bias-corrected Chao1 richness estimate.
///
/// With doubletons present: `S_obs + ((n-1)/n) * f1^2 / (2 f2)`; otherwise
/// the bias-corrected form `S_obs + ((n-1)/n) * f1 (f1 - 1) / 2`.
pub fn chao1(av: &AbundanceVector) -> f64 {
    let n = av.n() as f64;
    let s_obs = av.s_obs() as f64;
    let f1 = av.f1() as f64;
    let f2 = av.f2() as f64;
    let depth_factor = (n - 1.0) / n;
    if f2 > 0.0 {
        s_obs + depth_factor * f1 * f1 / (2.0 * f2)
    } else {
        s_obs + depth_factor * f1 * (f1 - 1.0) / 2.0
    }
}

/// Expected richness after observing `m` additional reads.
///
/// `S_obs + f0_hat * (1 - (1 - f1 / (n f0_hat + f1))^m)` with
/// `f0_hat = chao1 - S_obs`. Monotone non-decreasing in `m`, equal to
/// `S_obs` at `m = 0`, and bounded above by the Chao1 asymptote.
pub fn extrapolate(av: &AbundanceVector, m: u64) -> f64 {
    let s_obs = av.s_obs() as f64;
    let f0_hat = chao1(av) - s_obs;
    if f0_hat <= 0.0 || m == 0 {
        return s_obs;
    }
    let n = av.n() as f64;
    let f1 = av.f1() as f64;
    if f1 == 0.0 {
        return s_obs;
    }
    let rate = 1.0 - f1 / (n * f0_hat + f1);
    s_obs + f0_hat * (1.0 - rate.powf(m as f64))
}

/// One field sample with its estimated richness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RichnessSample {
    pub sample_id: String,
    pub lat: f64,
    pub lon: f64,
    pub biome_id: String,
    pub richness_hat: f64,
}

/// Per-biome quantities behind the filter decision.
#[derive(Debug, Clone, Serialize)]
pub struct BiomeStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub threshold: f64,
    pub n: usize,
    pub removed: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Kept flag per input sample, in input order.
    pub kept: Vec<bool>,
    pub biome_stats: BTreeMap<String, BiomeStats>,
}

impl FilterOutcome {
    pub fn kept_samples<'a>(&self, samples: &'a [RichnessSample]) -> Vec<&'a RichnessSample> {
        samples
            .iter()
            .zip(&self.kept)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s)
            .collect()
    }

    /// (min, max) of retained richness values, if any were retained.
    pub fn retained_range(&self, samples: &[RichnessSample]) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for (s, &k) in samples.iter().zip(&self.kept) {
            if k {
                range = Some(match range {
                    None => (s.richness_hat, s.richness_hat),
                    Some((lo, hi)) => (lo.min(s.richness_hat), hi.max(s.richness_hat)),
                });
            }
        }
        range
    }
}

/// Remove, within each biome, samples with richness above
/// `median + 5 * IQR`. Quantiles use linear interpolation between order
/// statistics; the filter is a single pass and output order equals input
/// order.
pub fn biome_filter(samples: &[RichnessSample]) -> Result<FilterOutcome> {
    for s in samples {
        if !s.richness_hat.is_finite() {
            return Err(Error::Validation(format!(
                "richness_hat: non-finite value for sample {}",
                s.sample_id
            )));
        }
    }
    let mut by_biome: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in samples {
        by_biome
            .entry(s.biome_id.as_str())
            .or_default()
            .push(s.richness_hat);
    }
    let mut stats_map: BTreeMap<String, BiomeStats> = BTreeMap::new();
    for (biome, mut values) in by_biome {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = stats::quantile_sorted(&values, 0.5);
        let q1 = stats::quantile_sorted(&values, 0.25);
        let q3 = stats::quantile_sorted(&values, 0.75);
        let iqr = q3 - q1;
        stats_map.insert(
            biome.to_string(),
            BiomeStats {
                median,
                q1,
                q3,
                threshold: median + 5.0 * iqr,
                n: values.len(),
                removed: 0,
            },
        );
    }
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        let st = stats_map.get_mut(&s.biome_id).expect("biome stats exist");
        let keep = s.richness_hat <= st.threshold;
        if !keep {
            st.removed += 1;
        }
        kept.push(keep);
    }
    Ok(FilterOutcome {
        kept,
        biome_stats: stats_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn av(counts: &[u64]) -> AbundanceVector {
        AbundanceVector::new(counts.to_vec()).unwrap()
    }

    #[test]
    fn chao1_no_singletons_equals_observed() {
        // f1 = 0: estimate falls back to S_obs exactly in both branches.
        let v = av(&[2, 3, 2, 5]);
        assert_eq!(chao1(&v), v.s_obs() as f64);
    }

    #[test]
    fn chao1_hand_case_with_doubletons() {
        // S_obs = 10, f1 = 4, f2 = 2, n = 30:
        // 10 + (29/30) * 16/4 = 13.8666...
        let counts = [1, 1, 1, 1, 2, 2, 3, 4, 7, 8];
        let v = av(&counts);
        assert_eq!(v.n(), 30);
        assert_eq!(v.s_obs(), 10);
        assert_eq!(v.f1(), 4);
        assert_eq!(v.f2(), 2);
        let expected = 10.0 + (29.0 / 30.0) * 16.0 / 4.0;
        assert!((chao1(&v) - expected).abs() < 1e-9);
        assert!((chao1(&v) - 13.866666666666667).abs() < 1e-9);
    }

    #[test]
    fn chao1_hand_case_bias_corrected_branch() {
        // f1 = 3, f2 = 0, S_obs = 5, n = 10: 5 + (9/10) * 3*2/2 = 7.7
        let counts = [1, 1, 1, 3, 4];
        let v = av(&counts);
        assert_eq!(v.n(), 10);
        assert_eq!(v.f1(), 3);
        assert_eq!(v.f2(), 0);
        assert!((chao1(&v) - 7.7).abs() < 1e-9);
    }

    #[test]
    fn chao1_rejects_empty_and_zero_counts() {
        assert!(AbundanceVector::new(vec![]).is_err());
        assert!(AbundanceVector::new(vec![1, 0, 2]).is_err());
    }

    #[test]
    fn extrapolate_zero_additional_reads() {
        let v = av(&[1, 1, 2, 5]);
        assert_eq!(extrapolate(&v, 0), v.s_obs() as f64);
    }

    #[test]
    fn extrapolate_approaches_chao1() {
        let v = av(&[1, 1, 1, 2, 2, 3, 9]);
        let asym = chao1(&v);
        let big_m = v.n() * 1_000_000;
        assert!((extrapolate(&v, big_m) - asym).abs() < 1e-6);
    }

    #[test]
    fn extrapolate_no_unseen_species() {
        let v = av(&[3, 4, 5]);
        assert_eq!(extrapolate(&v, 100), v.s_obs() as f64);
    }

    /// Monte Carlo oracle: observed richness when drawing `reads` reads from
    /// a uniform community of `species` species.
    fn subsample_richness(species: usize, reads: u64, rng: &mut impl Rng) -> usize {
        let mut seen = vec![false; species];
        for _ in 0..reads {
            seen[rng.random_range(0..species)] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    #[test]
    fn extrapolate_matches_multinomial_simulation() {
        // Uniform community of 20 species, observed depth n = 40,
        // extrapolated to 2n. Oracle: 10^4 fresh multinomial draws of 2n
        // reads from the true community; the estimate must land inside the
        // middle 99% of simulated richness values. The observed draw (seed
        // 21) has S_obs = 17, f1 = 5, f2 = 5, matching the expected profile
        // of a 40-read draw (E[S_obs] = 17.4, E[f1] = 5.4, E[f2] = 5.5).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let species = 20usize;
        let n_reads = 40u64;
        let mut tally = vec![0u64; species];
        for _ in 0..n_reads {
            tally[rng.random_range(0..species)] += 1;
        }
        let counts: Vec<u64> = tally.into_iter().filter(|&c| c > 0).collect();
        let v = AbundanceVector::new(counts).unwrap();
        assert_eq!((v.s_obs(), v.f1(), v.f2()), (17, 5, 5));
        let estimate = extrapolate(&v, n_reads);

        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let replicates = 10_000;
        let mut sims: Vec<f64> = (0..replicates)
            .map(|_| subsample_richness(species, 2 * n_reads, &mut rng) as f64)
            .collect();
        sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = crate::stats::quantile_sorted(&sims, 0.005);
        let hi = crate::stats::quantile_sorted(&sims, 0.995);
        assert!(
            estimate >= lo && estimate <= hi,
            "estimate {estimate} outside simulated 99% interval [{lo}, {hi}]"
        );
    }

    fn sample(id: &str, biome: &str, richness: f64) -> RichnessSample {
        RichnessSample {
            sample_id: id.into(),
            lat: 0.0,
            lon: 0.0,
            biome_id: biome.into(),
            richness_hat: richness,
        }
    }

    #[test]
    fn filter_keeps_constant_biome() {
        let samples: Vec<_> = (0..6).map(|i| sample(&format!("s{i}"), "b", 12.0)).collect();
        let out = biome_filter(&samples).unwrap();
        assert!(out.kept.iter().all(|&k| k));
    }

    #[test]
    fn filter_removes_planted_outlier() {
        // {1..8, 100}: median 5, Q1 3, Q3 7, threshold 5 + 5*4 = 25.
        let mut samples: Vec<_> = (1..=8)
            .map(|i| sample(&format!("s{i}"), "b", f64::from(i)))
            .collect();
        samples.push(sample("outlier", "b", 100.0));
        let out = biome_filter(&samples).unwrap();
        assert_eq!(
            out.kept,
            vec![true, true, true, true, true, true, true, true, false]
        );
        let st = &out.biome_stats["b"];
        assert_eq!(st.median, 5.0);
        assert_eq!(st.q1, 3.0);
        assert_eq!(st.q3, 7.0);
        assert_eq!(st.threshold, 25.0);
        assert_eq!(st.removed, 1);
        // One pass is idempotent here: retained values all sit below the
        // original threshold, so re-filtering removes nothing further.
        let kept: Vec<RichnessSample> = out.kept_samples(&samples).into_iter().cloned().collect();
        let again = biome_filter(&kept).unwrap();
        assert!(again.kept.iter().all(|&k| k));
    }

    #[test]
    fn filter_is_per_biome() {
        // Biome A is {1..8, 1000} (threshold 25); biome B holds uniformly
        // large values. Removals never cross biome boundaries: the outlier
        // in A goes, everything in B stays despite being 100x larger than
        // A's values.
        let mut samples: Vec<_> = (1..=8)
            .map(|i| sample(&format!("a{i}"), "A", f64::from(i)))
            .collect();
        samples.push(sample("a_outlier", "A", 1000.0));
        samples.push(sample("b1", "B", 990.0));
        samples.push(sample("b2", "B", 1000.0));
        samples.push(sample("b3", "B", 1010.0));
        let out = biome_filter(&samples).unwrap();
        assert!(!out.kept[8]);
        assert!(out.kept[9] && out.kept[10] && out.kept[11]);
        assert_eq!(out.biome_stats["A"].removed, 1);
        assert_eq!(out.biome_stats["B"].removed, 0);
    }

    #[test]
    fn filter_keeps_zero_richness() {
        let samples = vec![sample("z", "b", 0.0), sample("x", "b", 3.0)];
        let out = biome_filter(&samples).unwrap();
        assert!(out.kept.iter().all(|&k| k));
    }

    proptest! {
        // chao1 >= S_obs with equality iff f1 <= 1 (f2 > 0 branch: iff f1 = 0).
        #[test]
        fn prop_chao1_lower_bound(counts in proptest::collection::vec(1u64..6, 1..40)) {
            let v = AbundanceVector::new(counts).unwrap();
            let est = chao1(&v);
            let s_obs = v.s_obs() as f64;
            prop_assert!(est >= s_obs - 1e-12);
            if v.n() > 1 {
                let equal = (est - s_obs).abs() < 1e-12;
                if v.f2() > 0 {
                    prop_assert_eq!(equal, v.f1() == 0);
                } else {
                    prop_assert_eq!(equal, v.f1() <= 1);
                }
            }
        }

        // Extrapolation is monotone non-decreasing in m and bounded by chao1.
        #[test]
        fn prop_extrapolate_monotone_bounded(
            counts in proptest::collection::vec(1u64..6, 1..40),
            steps in proptest::collection::vec(0u64..200, 1..8),
        ) {
            let v = AbundanceVector::new(counts).unwrap();
            let asym = chao1(&v) + 1e-9;
            let mut ms = steps;
            ms.sort_unstable();
            let mut prev = -1.0f64;
            for m in ms {
                let e = extrapolate(&v, m);
                prop_assert!(e >= prev - 1e-12);
                prop_assert!(e <= asym);
                prev = e;
            }
        }
    }
}
