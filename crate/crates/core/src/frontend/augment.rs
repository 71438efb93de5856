use rand::Rng;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// SpecAugment policy: frequency bands and time bands set to the matrix mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub freq_mask_width_max: usize,
    pub freq_masks: usize,
    pub time_mask_width_max: usize,
    pub time_masks: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            freq_mask_width_max: 8,
            freq_masks: 2,
            time_mask_width_max: 20,
            time_masks: 2,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            freq_mask_width_max: 0,
            freq_masks: 0,
            time_mask_width_max: 0,
            time_masks: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.freq_masks == 0 || self.freq_mask_width_max == 0)
            && (self.time_masks == 0 || self.time_mask_width_max == 0)
    }
}

/// Half-open range `[start, start + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

impl Band {
    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.start + self.width
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentMasks {
    pub freq: Vec<Band>,
    pub time: Vec<Band>,
}

impl AugmentMasks {
    pub fn covers(&self, t: usize, d: usize) -> bool {
        self.freq.iter().any(|b| b.contains(d)) || self.time.iter().any(|b| b.contains(t))
    }
}

fn draw_bands<R: Rng>(rng: &mut R, count: usize, width_max: usize, extent: usize) -> Vec<Band> {
    let width_max = width_max.min(extent);
    (0..count)
        .map(|_| {
            let width = rng.random_range(0..=width_max);
            let start = rng.random_range(0..=extent - width);
            Band { start, width }
        })
        .filter(|b| b.width > 0)
        .collect()
}

/// Draws mask bands for a `frames x dims` matrix. Widths are clamped to the
/// matrix extents so bands never leave the matrix.
pub fn sample_masks<R: Rng>(policy: &AugmentPolicy, frames: usize, dims: usize, rng: &mut R) -> AugmentMasks {
    AugmentMasks {
        freq: draw_bands(rng, policy.freq_masks, policy.freq_mask_width_max, dims),
        time: draw_bands(rng, policy.time_masks, policy.time_mask_width_max, frames),
    }
}

pub fn apply_masks(features: &FeatureMatrix, masks: &AugmentMasks) -> Result<FeatureMatrix> {
    let (frames, dims) = (features.frames(), features.dims());
    let out_of_range = masks.freq.iter().any(|b| b.start + b.width > dims)
        || masks.time.iter().any(|b| b.start + b.width > frames);
    if out_of_range {
        return Err(Error::Input("mask band outside feature matrix".into()));
    }
    if masks.freq.is_empty() && masks.time.is_empty() {
        return Ok(features.clone());
    }
    let fill = features.mean() as f32;
    let mut values = features.values().to_vec();
    for t in 0..frames {
        for d in 0..dims {
            if masks.covers(t, d) {
                values[t * dims + d] = fill;
            }
        }
    }
    FeatureMatrix::new(frames, dims, values)
}

/// Masks random frequency and time bands with the matrix mean. Cells outside
/// the bands are returned unchanged.
pub fn spec_augment<R: Rng>(features: &FeatureMatrix, policy: &AugmentPolicy, rng: &mut R) -> FeatureMatrix {
    let masks = sample_masks(policy, features.frames(), features.dims(), rng);
    apply_masks(features, &masks).expect("sampled bands lie inside the matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(frames: usize, dims: usize) -> FeatureMatrix {
        let v = (0..frames * dims).map(|i| (i as f32 * 0.37).sin()).collect();
        FeatureMatrix::new(frames, dims, v).unwrap()
    }

    #[test]
    fn zero_policy_is_identity() {
        let f = ramp(30, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(spec_augment(&f, &AugmentPolicy::none(), &mut rng), f);
    }

    #[test]
    fn single_full_width_freq_mask_is_one_band() {
        let f = ramp(20, 40);
        let policy = AugmentPolicy {
            freq_mask_width_max: 40,
            freq_masks: 1,
            time_mask_width_max: 0,
            time_masks: 0,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = spec_augment(&f, &policy, &mut rng);
            let cols: Vec<usize> = (0..40).filter(|&d| out.get(0, d) != f.get(0, d)).collect();
            if let (Some(first), Some(last)) = (cols.first(), cols.last()) {
                assert_eq!(cols.len(), last - first + 1, "band not contiguous");
            }
        }
    }

    #[test]
    fn two_time_masks_of_five_cover_at_most_ten_frames() {
        let f = ramp(98, 40);
        let policy = AugmentPolicy {
            freq_mask_width_max: 0,
            freq_masks: 0,
            time_mask_width_max: 5,
            time_masks: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = spec_augment(&f, &policy, &mut rng);
        let masked = (0..98).filter(|&t| out.row(t) != f.row(t)).count();
        assert!(masked <= 10, "{masked}");
    }

    #[test]
    fn same_seed_same_masks() {
        let f = ramp(50, 40);
        let p = AugmentPolicy::default();
        let a = spec_augment(&f, &p, &mut ChaCha8Rng::seed_from_u64(9));
        let b = spec_augment(&f, &p, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn only_masked_cells_change(seed in any::<u64>(), frames in 1usize..60, dims in 1usize..45,
                                    fw in 0usize..50, fm in 0usize..4, tw in 0usize..70, tm in 0usize..4) {
            let f = ramp(frames, dims);
            let policy = AugmentPolicy { freq_mask_width_max: fw, freq_masks: fm, time_mask_width_max: tw, time_masks: tm };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks = sample_masks(&policy, frames, dims, &mut rng);
            let out = apply_masks(&f, &masks).unwrap();
            let fill = f.mean() as f32;
            for t in 0..frames {
                for d in 0..dims {
                    if masks.covers(t, d) {
                        prop_assert_eq!(out.get(t, d), fill);
                    } else {
                        prop_assert_eq!(out.get(t, d).to_bits(), f.get(t, d).to_bits());
                    }
                }
            }
        }
    }
}
