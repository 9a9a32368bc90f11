use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::ImageTensor;

/// Zero-pad, random crop back to size, random horizontal mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad_pixels: usize,
    pub horizontal_flip_probability: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad_pixels: 4,
            horizontal_flip_probability: 0.5,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let p = self.horizontal_flip_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::InvalidAugment(format!(
                "horizontal_flip_probability {p} is outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Top-left corner of the crop inside the padded image, uniform over
/// `{0..=2*pad}^2`, drawn row offset first.
pub fn sample_crop_offset(pad: usize, rng: &mut impl Rng) -> (usize, usize) {
    let oy = rng.random_range(0..=2 * pad);
    let ox = rng.random_range(0..=2 * pad);
    (oy, ox)
}

pub fn augment(
    image: &ImageTensor,
    input_size: usize,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ImageTensor, DataError> {
    if image.height != input_size || image.width != input_size || image.channels != 3 {
        return Err(DataError::WrongShape {
            expected: input_size,
            actual: image.shape(),
        });
    }
    config.validate()?;
    if !config.enabled {
        return Ok(image.clone());
    }
    let pad = config.pad_pixels;
    let (oy, ox) = sample_crop_offset(pad, rng);
    let flip = rng.random::<f64>() < config.horizontal_flip_probability;

    let (h, w) = (image.height, image.width);
    let mut out = ImageTensor::zeros(image.channels, h, w);
    for c in 0..image.channels {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dx = if flip { w - 1 - x } else { x };
                out.set(c, y, dx, image.get(c, sy as usize, sx as usize));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(size: usize) -> ImageTensor {
        let data = (0..3 * size * size).map(|i| (i % 97) as f32 / 97.0 + 0.01).collect();
        ImageTensor::from_vec(3, size, size, data)
    }

    fn mirror(img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        for c in 0..3 {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(c, y, img.width - 1 - x, img.get(c, y, x));
                }
            }
        }
        out
    }

    #[test]
    fn identity_without_pad_or_flip() {
        let img = ramp(32);
        let cfg = AugmentConfig {
            pad_pixels: 0,
            horizontal_flip_probability: 0.0,
            enabled: true,
        };
        let mut r = rng::stream(1, &[]);
        for _ in 0..5 {
            assert_eq!(augment(&img, 32, &cfg, &mut r).unwrap(), img);
        }
    }

    #[test]
    fn certain_flip_is_an_involution() {
        let img = ramp(32);
        let cfg = AugmentConfig {
            pad_pixels: 0,
            horizontal_flip_probability: 1.0,
            enabled: true,
        };
        let mut r = rng::stream(1, &[]);
        let once = augment(&img, 32, &cfg, &mut r).unwrap();
        assert_eq!(once, mirror(&img));
        assert_eq!(augment(&once, 32, &cfg, &mut r).unwrap(), img);
    }

    #[test]
    fn disabled_is_identity() {
        let img = ramp(32);
        let mut r = rng::stream(1, &[]);
        assert_eq!(augment(&img, 32, &AugmentConfig::disabled(), &mut r).unwrap(), img);
    }

    #[test]
    fn crop_offsets_are_uniform_over_81_cells() {
        let mut r = rng::stream(2024, &[]);
        let mut counts = [[0usize; 9]; 9];
        let draws = 10_000;
        for _ in 0..draws {
            let (y, x) = sample_crop_offset(4, &mut r);
            counts[y][x] += 1;
        }
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 80 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 124.84, "chi2 = {chi2}");
        assert!(counts.iter().flatten().all(|&c| c > 0));
    }

    #[test]
    fn pad_shift_moves_content() {
        let img = ramp(32);
        let cfg = AugmentConfig {
            pad_pixels: 4,
            horizontal_flip_probability: 0.0,
            enabled: true,
        };
        let mut r = rng::stream(77, &[]);
        let mut probe = r.clone();
        let (oy, ox) = sample_crop_offset(4, &mut probe);
        let out = augment(&img, 32, &cfg, &mut r).unwrap();
        for y in 0..32usize {
            for x in 0..32usize {
                let sy = y as isize + oy as isize - 4;
                let sx = x as isize + ox as isize - 4;
                let expected = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                    img.get(1, sy as usize, sx as usize)
                } else {
                    0.0
                };
                assert_eq!(out.get(1, y, x), expected);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut r = rng::stream(1, &[]);
        let cfg = AugmentConfig::default();
        assert!(augment(&ImageTensor::zeros(3, 32, 30), 32, &cfg, &mut r).is_err());
        assert!(augment(&ImageTensor::zeros(3, 40, 40), 32, &cfg, &mut r).is_err());
        let bad = AugmentConfig {
            horizontal_flip_probability: 1.5,
            ..cfg
        };
        assert!(augment(&ImageTensor::zeros(3, 32, 32), 32, &bad, &mut r).is_err());
    }

    proptest::proptest! {
        #[test]
        fn preserves_shape_and_range(seed in 0u64..1000, pad in 0usize..8, p in 0.0f64..=1.0) {
            let img = ramp(32);
            let (lo, hi) = img.min_max();
            let cfg = AugmentConfig { pad_pixels: pad, horizontal_flip_probability: p, enabled: true };
            let mut r = rng::stream(seed, &[]);
            let out = augment(&img, 32, &cfg, &mut r).unwrap();
            proptest::prop_assert_eq!(out.shape(), img.shape());
            let (olo, ohi) = out.min_max();
            proptest::prop_assert!(olo >= lo.min(0.0) && ohi <= hi);
            let mut r2 = rng::stream(seed, &[]);
            proptest::prop_assert_eq!(augment(&img, 32, &cfg, &mut r2).unwrap(), out);
        }
    }
}
