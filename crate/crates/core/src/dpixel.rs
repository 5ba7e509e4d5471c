//! Per-location observation time series ("d-pixels"), tile stacking, and the
//! two-view temporal sampling augmentation feeding the self-supervised loss.
//!
//! A tile stack holds spatially aligned tiles over time: data `[T x rows x
//! cols x C]`, a validity mask `[T x rows x cols]`, and the day-of-year of
//! each timestep. A d-pixel is one spatial location's full multi-channel
//! series plus its validity flags. Views are fixed-size random subsets of
//! valid timesteps, drawn independently per modality.

use ndarray::{Array2, Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorio::{PatchBundle, S1_BANDS, S2_BANDS, PATCH};

/// Spatially aligned tiles stacked over a time period.
#[derive(Debug, Clone)]
pub struct TileStack {
    /// `[T x rows x cols x C]`
    pub data: Array4<f64>,
    /// `[T x rows x cols]`, 0 = missing, 1 = valid
    pub mask: Array3<u8>,
    /// `[T]` day-of-year per timestep
    pub doys: Vec<i32>,
}

impl TileStack {
    pub fn new(data: Array4<f64>, mask: Array3<u8>, doys: Vec<i32>) -> Result<Self> {
        let (t, h, w, _c) = data.dim();
        if t == 0 {
            return Err(Error::Validation("tile stack: T must be >= 1".into()));
        }
        if mask.dim() != (t, h, w) {
            return Err(Error::Dimension(format!(
                "tile stack: mask shape {:?} does not match data {:?}",
                mask.dim(),
                data.dim()
            )));
        }
        if doys.len() != t {
            return Err(Error::Dimension(format!(
                "tile stack: {} doys for T = {t}",
                doys.len()
            )));
        }
        Ok(TileStack { data, mask, doys })
    }

    pub fn rows(&self) -> usize {
        self.data.dim().1
    }

    pub fn cols(&self) -> usize {
        self.data.dim().2
    }
}

/// One location's multi-channel series `[T x C]` with validity flags.
#[derive(Debug, Clone)]
pub struct DPixel {
    pub series: Array2<f64>,
    pub valid: Vec<u8>,
    pub doys: Vec<i32>,
}

impl DPixel {
    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Copy one spatial location's series and mask out of a stack.
pub fn extract_dpixel(stack: &TileStack, i: usize, j: usize) -> Result<DPixel> {
    let (t, h, w, c) = stack.data.dim();
    if i >= h || j >= w {
        return Err(Error::Dimension(format!(
            "pixel index ({i}, {j}) out of bounds for {h}x{w} stack"
        )));
    }
    let mut series = Array2::zeros((t, c));
    let mut valid = vec![0u8; t];
    for ti in 0..t {
        for ci in 0..c {
            series[[ti, ci]] = stack.data[[ti, i, j, ci]];
        }
        valid[ti] = stack.mask[[ti, i, j]];
    }
    Ok(DPixel {
        series,
        valid,
        doys: stack.doys.clone(),
    })
}

/// Timestep indices selected for one view, per modality, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub s2_idx: Vec<usize>,
    pub s1_idx: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPair {
    pub view_a: View,
    pub view_b: View,
}

fn draw_indices(valid: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = if valid.len() >= k {
        // Without replacement when enough valid observations exist.
        rand::seq::index::sample(rng, valid.len(), k)
            .into_iter()
            .map(|i| valid[i])
            .collect()
    } else {
        // Sparse pixel: repeat observations to keep the model input length
        // fixed.
        (0..k).map(|_| valid[rng.random_range(0..valid.len())]).collect()
    };
    picked.sort_unstable();
    picked
}

/// Draw one view: `k2` optical and `k1` radar timesteps uniformly from the
/// valid timesteps of each modality. Sampling is without replacement when
/// enough valid steps exist, with replacement otherwise; indices come back
/// sorted so downstream sequence order is chronological.
pub fn sample_view(
    dp_s2: &DPixel,
    dp_s1: &DPixel,
    k2: usize,
    k1: usize,
    rng: &mut impl Rng,
) -> Result<View> {
    let v2 = dp_s2.valid_indices();
    if v2.is_empty() {
        return Err(Error::Validation(
            "empty modality: no valid s2 timesteps".into(),
        ));
    }
    let v1 = dp_s1.valid_indices();
    if v1.is_empty() {
        return Err(Error::Validation(
            "empty modality: no valid s1 timesteps".into(),
        ));
    }
    Ok(View {
        s2_idx: draw_indices(&v2, k2, rng),
        s1_idx: draw_indices(&v1, k1, rng),
    })
}

/// Two independent draws from one rng stream; the views may overlap.
pub fn make_view_pair(
    dp_s2: &DPixel,
    dp_s1: &DPixel,
    k2: usize,
    k1: usize,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    let view_a = sample_view(dp_s2, dp_s1, k2, k1, rng)?;
    let view_b = sample_view(dp_s2, dp_s1, k2, k1, rng)?;
    Ok(ViewPair { view_a, view_b })
}

/// Default number of sampled timesteps per view for both modalities.
pub const DEFAULT_VIEW_STEPS: usize = 40;

/// Stable 64-bit FNV-1a hash; used to derive per-sample rng streams that are
/// independent of iteration order and thread count.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rng stream for one sample, seeded from the global seed and the sample id.
pub fn sample_rng(global_seed: u64, sample_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(global_seed ^ stable_hash(sample_id).rotate_left(17))
}

/// Per-modality tile stacks from a loaded bundle.
pub fn s2_stack(bundle: &PatchBundle) -> TileStack {
    TileStack {
        data: bundle.s2_bands.mapv(f64::from),
        mask: bundle.s2_mask.clone(),
        doys: bundle.s2_doys.clone(),
    }
}

pub fn s1_stack(bundle: &PatchBundle) -> TileStack {
    TileStack {
        data: bundle.s1_bands.mapv(f64::from),
        mask: bundle.s1_mask.clone(),
        doys: bundle.s1_doys.clone(),
    }
}

fn synth_doys(count: usize, rng: &mut impl Rng) -> Vec<i32> {
    let mut doys: Vec<i32> = rand::seq::index::sample(rng, 366, count)
        .into_iter()
        .map(|d| d as i32 + 1)
        .collect();
    doys.sort_unstable();
    doys
}

fn synth_modality(
    t: usize,
    channels: usize,
    valid_fraction: f64,
    rng: &mut impl Rng,
) -> (Array4<f32>, Array3<u8>, Vec<i32>) {
    let doys = synth_doys(t, rng);
    let mut bands = Array4::<f32>::zeros((t, PATCH, PATCH, channels));
    let mut mask = Array3::<u8>::zeros((t, PATCH, PATCH));
    // Channel-specific seasonal sinusoid plus a small per-pixel offset and
    // uniform noise; amplitude and phase vary by channel so channels are not
    // collinear.
    let mut pixel_offset = [[0.0f64; PATCH]; PATCH];
    for row in &mut pixel_offset {
        for v in row.iter_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    for ti in 0..t {
        let season = f64::from(doys[ti]) / 365.0 * std::f64::consts::TAU;
        for i in 0..PATCH {
            for j in 0..PATCH {
                mask[[ti, i, j]] = u8::from(rng.random::<f64>() < valid_fraction);
                for c in 0..channels {
                    let phase = c as f64 * 0.7;
                    let amp = 0.3 + 0.05 * c as f64;
                    let base = 0.5 + 0.1 * c as f64;
                    let noise = rng.random_range(-0.02..0.02);
                    bands[[ti, i, j, c]] =
                        (base + amp * (season + phase).sin() + pixel_offset[i][j] + noise) as f32;
                }
            }
        }
    }
    // Guarantee every pixel keeps at least one valid observation so view
    // sampling stays defined even at tiny valid fractions.
    for i in 0..PATCH {
        for j in 0..PATCH {
            if (0..t).all(|ti| mask[[ti, i, j]] == 0) {
                mask[[0, i, j]] = 1;
            }
        }
    }
    (bands, mask, doys)
}

/// Deterministic synthetic patch bundle: sinusoidal seasonal band signals
/// with Bernoulli validity masks.
pub fn synth_bundle(seed: u64, t2: usize, t1: usize, valid_fraction: f64) -> Result<PatchBundle> {
    if !(valid_fraction > 0.0 && valid_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "valid_fraction must be in (0, 1], got {valid_fraction}"
        )));
    }
    if t2 == 0 || t1 == 0 || t2 > 366 || t1 > 366 {
        return Err(Error::Domain(format!(
            "timestep counts must be in [1, 366], got t2={t2}, t1={t1}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s2_bands, s2_mask, s2_doys) = synth_modality(t2, S2_BANDS, valid_fraction, &mut rng);
    let (s1_bands, s1_mask, s1_doys) = synth_modality(t1, S1_BANDS, valid_fraction, &mut rng);
    Ok(PatchBundle {
        sample_id: format!("synth-{seed:08x}"),
        lat: rng.random_range(-60.0..70.0),
        lon: rng.random_range(-180.0..180.0),
        year: 2024,
        s2_bands,
        s2_mask,
        s2_doys,
        s1_bands,
        s1_mask,
        s1_doys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_cell_stack() -> TileStack {
        let data = Array4::from_shape_vec((1, 1, 1, 2), vec![3.0, 4.0]).unwrap();
        let mask = Array3::from_elem((1, 1, 1), 1u8);
        TileStack::new(data, mask, vec![100]).unwrap()
    }

    #[test]
    fn extract_single_cell() {
        let dp = extract_dpixel(&single_cell_stack(), 0, 0).unwrap();
        assert_eq!(dp.series, Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
        assert_eq!(dp.valid, vec![1]);
        assert_eq!(dp.doys, vec![100]);
    }

    #[test]
    fn extract_propagates_mask() {
        let data = Array4::zeros((2, 1, 1, 1));
        let mut mask = Array3::from_elem((2, 1, 1), 1u8);
        mask[[1, 0, 0]] = 0;
        let stack = TileStack::new(data, mask, vec![10, 20]).unwrap();
        let dp = extract_dpixel(&stack, 0, 0).unwrap();
        assert_eq!(dp.valid, vec![1, 0]);
    }

    #[test]
    fn extract_out_of_bounds() {
        assert!(extract_dpixel(&single_cell_stack(), 1, 0).is_err());
        assert!(extract_dpixel(&single_cell_stack(), 0, 1).is_err());
    }

    #[test]
    fn extract_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (t, h, w, c) = (6, 5, 4, 3);
        let data = Array4::from_shape_fn((t, h, w, c), |_| rng.random::<f64>());
        let mask = Array3::from_shape_fn((t, h, w), |_| u8::from(rng.random::<f64>() < 0.7));
        let stack = TileStack::new(data, mask, (1..=t as i32).collect()).unwrap();
        for i in 0..h {
            for j in 0..w {
                let dp = extract_dpixel(&stack, i, j).unwrap();
                for ti in 0..t {
                    assert_eq!(dp.valid[ti], stack.mask[[ti, i, j]]);
                    for ci in 0..c {
                        assert_eq!(dp.series[[ti, ci]], stack.data[[ti, i, j, ci]]);
                    }
                }
            }
        }
    }

    fn dpixel_with_valid(valid: Vec<u8>) -> DPixel {
        let t = valid.len();
        DPixel {
            series: Array2::zeros((t, 2)),
            valid,
            doys: (1..=t as i32).collect(),
        }
    }

    #[test]
    fn view_without_replacement_when_enough_valid() {
        let dp2 = dpixel_with_valid((0..60).map(|_| 1).collect());
        let dp1 = dpixel_with_valid(vec![1; 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let view = sample_view(&dp2, &dp1, 40, 10, &mut rng).unwrap();
        assert_eq!(view.s2_idx.len(), 40);
        let mut dedup = view.s2_idx.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 40, "indices must be distinct");
        assert!(view.s2_idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn view_with_replacement_when_sparse() {
        let mut valid = vec![0u8; 10];
        valid[4] = 1;
        let dp2 = dpixel_with_valid(valid.clone());
        let dp1 = dpixel_with_valid(valid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let view = sample_view(&dp2, &dp1, 3, 2, &mut rng).unwrap();
        assert_eq!(view.s2_idx, vec![4, 4, 4]);
        assert_eq!(view.s1_idx, vec![4, 4]);
    }

    #[test]
    fn view_deterministic_for_fixed_seed() {
        let dp2 = dpixel_with_valid(vec![1; 50]);
        let dp1 = dpixel_with_valid(vec![1; 20]);
        let a = sample_view(&dp2, &dp1, 40, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_view(&dp2, &dp1, 40, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_modality_is_an_error() {
        let dp2 = dpixel_with_valid(vec![0; 10]);
        let dp1 = dpixel_with_valid(vec![1; 10]);
        assert!(sample_view(&dp2, &dp1, 4, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_view(&dp1, &dp2, 4, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn view_pair_usually_differs_with_spare_capacity() {
        let dp2 = dpixel_with_valid(vec![1; 80]);
        let dp1 = dpixel_with_valid(vec![1; 80]);
        let mut unequal = 0;
        for seed in 0..1000u64 {
            let pair =
                make_view_pair(&dp2, &dp1, 40, 40, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if pair.view_a != pair.view_b {
                unequal += 1;
            }
        }
        assert!(unequal > 990, "only {unequal}/1000 pairs differed");
    }

    #[test]
    fn view_pair_forced_equal_when_exact_capacity() {
        let dp2 = dpixel_with_valid(vec![1; 40]);
        let dp1 = dpixel_with_valid(vec![1; 40]);
        let pair = make_view_pair(&dp2, &dp1, 40, 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let all: Vec<usize> = (0..40).collect();
        assert_eq!(pair.view_a.s2_idx, all);
        assert_eq!(pair.view_b.s2_idx, all);
        assert_eq!(pair.view_a, pair.view_b);
    }

    #[test]
    fn view_pair_deterministic() {
        let dp2 = dpixel_with_valid(vec![1; 80]);
        let dp1 = dpixel_with_valid(vec![1; 30]);
        let a = make_view_pair(&dp2, &dp1, 40, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_view_pair(&dp2, &dp1, 40, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_bundle_full_validity_and_determinism() {
        let b = synth_bundle(1, 40, 20, 1.0).unwrap();
        assert!(b.s2_mask.iter().all(|&m| m == 1));
        assert!(b.s1_mask.iter().all(|&m| m == 1));
        assert_eq!(b.s2_bands.dim(), (40, 3, 3, 10));
        b.validate().unwrap();
        let b2 = synth_bundle(1, 40, 20, 1.0).unwrap();
        assert_eq!(b.s2_bands, b2.s2_bands);
        assert_eq!(b.s1_doys, b2.s1_doys);
        assert_eq!(b.sample_id, b2.sample_id);
    }

    #[test]
    fn synth_bundle_valid_count_within_binomial_bound() {
        let b = synth_bundle(11, 100, 30, 0.5).unwrap();
        // s2 mask cells are Bernoulli(0.5) over 100*3*3 = 900 draws; 99%
        // interval is 450 +/- 2.576 * sqrt(900 * 0.25) ~= [411, 489].
        let n = 900.0f64;
        let count = b.s2_mask.iter().map(|&m| m as u32).sum::<u32>() as f64;
        let half_width = 2.576 * (n * 0.25).sqrt();
        assert!(
            (count - n * 0.5).abs() <= half_width,
            "valid count {count} outside 99% binomial interval"
        );
    }

    #[test]
    fn synth_bundle_rejects_bad_fraction() {
        assert!(synth_bundle(0, 10, 10, 0.0).is_err());
        assert!(synth_bundle(0, 10, 10, 1.5).is_err());
    }

    proptest! {
        // A sampled view never touches a masked timestep and is always
        // sorted, for any mask with at least one valid step per modality.
        #[test]
        fn prop_views_respect_mask_and_order(
            seed in 0u64..1000,
            mask2 in proptest::collection::vec(0u8..2, 1..50),
            mask1 in proptest::collection::vec(0u8..2, 1..50),
            k in 1usize..45,
        ) {
            let mut mask2 = mask2;
            let mut mask1 = mask1;
            if mask2.iter().all(|&m| m == 0) { mask2[0] = 1; }
            if mask1.iter().all(|&m| m == 0) { mask1[0] = 1; }
            let dp2 = dpixel_with_valid(mask2.clone());
            let dp1 = dpixel_with_valid(mask1.clone());
            let view = sample_view(&dp2, &dp1, k, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(view.s2_idx.len(), k);
            prop_assert!(view.s2_idx.iter().all(|&i| mask2[i] == 1));
            prop_assert!(view.s1_idx.iter().all(|&i| mask1[i] == 1));
            prop_assert!(view.s2_idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(view.s1_idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
