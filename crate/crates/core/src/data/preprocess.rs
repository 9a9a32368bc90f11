use std::path::Path;

use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::ImageTensor;

/// Per-channel `(x / 255 - mean) / std`. The default (mean 0, std 1) keeps
/// values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub fn load_image(path: &Path) -> Result<DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Converts to RGB, resizes to `input_size` square (bilinear, aspect not
/// preserved) when needed, and normalizes.
pub fn preprocess(image: &DynamicImage, input_size: usize, norm: &Normalization) -> ImageTensor {
    let rgb = image.to_rgb8();
    let size = input_size as u32;
    let rgb = if rgb.width() == size && rgb.height() == size {
        rgb
    } else {
        image::imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let mut out = ImageTensor::zeros(3, input_size, input_size);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            out.set(c, y as usize, x as usize, (v - norm.mean[c]) / norm.std[c]);
        }
    }
    out
}

pub fn preprocess_file(path: &Path, input_size: usize, norm: &Normalization) -> Result<ImageTensor, DataError> {
    Ok(preprocess(&load_image(path)?, input_size, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn checker(w: u32, h: u32) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, 200])
        }))
    }

    #[test]
    fn resizes_to_input_size() {
        let t = preprocess(&checker(400, 300), 224, &Normalization::default());
        assert_eq!(t.shape(), [3, 224, 224]);
        let t = preprocess(&checker(10, 10), 224, &Normalization::default());
        assert_eq!(t.shape(), [3, 224, 224]);
        let (lo, hi) = t.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn same_size_only_rescales_values() {
        let img = checker(224, 224);
        let t = preprocess(&img, 224, &Normalization::default());
        let rgb = img.to_rgb8();
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                assert_eq!(t.get(c, y as usize, x as usize), px.0[c] as f32 / 255.0);
            }
        }
    }

    #[test]
    fn normalization_applies() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(32, 32, Rgb([255, 0, 51])));
        let norm = Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let t = preprocess(&img, 32, &norm);
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(1, 5, 5), -1.0);
        assert!((t.get(2, 1, 1) - (-0.6)).abs() < 1e-6);
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        std::fs::write(&p, b"not an image").unwrap();
        match preprocess_file(&p, 32, &Normalization::default()) {
            Err(DataError::Decode { path, .. }) => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
    }
}
