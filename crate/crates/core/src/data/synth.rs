//! Synthetic "faces" whose age is encoded in simple image statistics.
//!
//! Layout per image (values before noise):
//! - green: a disc of intensity 0.9 on a 0.1 background, covering
//!   `0.1 + 0.5 t` of the image, where `t = (age - 1) / 99`;
//! - blue: a flat field of intensity `0.15 + 0.7 t`;
//! - red: a random horizontal ramp carrying no label information.
//!
//! The disc centre is jittered and every pixel gets Gaussian noise
//! (sigma 0.02), all drawn from a per-sample stream keyed by `(seed, index)`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{write_manifest, DataError, Dataset, Sample, SampleRecord};
use crate::granularity::{AgeLabel, AGE_MAX, AGE_MIN};
use crate::rng;
use crate::tensor::ImageTensor;

const STREAM_KEY: u64 = 0x5359_4e54; // "SYNT"

/// Constants of the encoding, exposed so tests can invert it.
pub struct SynthLayout {
    pub disc_value: f32,
    pub disc_background: f32,
    pub area_offset: f64,
    pub area_scale: f64,
    pub field_offset: f64,
    pub field_scale: f64,
    pub noise_sigma: f64,
}

pub const SYNTH_LAYOUT: SynthLayout = SynthLayout {
    disc_value: 0.9,
    disc_background: 0.1,
    area_offset: 0.1,
    area_scale: 0.5,
    field_offset: 0.15,
    field_scale: 0.7,
    noise_sigma: 0.02,
};

fn age_fraction(age: f64) -> f64 {
    (age - AGE_MIN as f64) / (AGE_MAX - AGE_MIN) as f64
}

fn draw_age(r: &mut impl Rng) -> f64 {
    // one decimal, like averaged annotations
    (r.random_range(AGE_MIN as f64..=AGE_MAX as f64) * 10.0).round() / 10.0
}

/// The label of sample `index` of stream `seed`, without rendering the image.
pub fn synth_age(seed: u64, index: u64) -> f64 {
    draw_age(&mut rng::stream(seed, &[STREAM_KEY, index]))
}

/// Generates sample `index` of the stream `seed`.
pub fn synth_sample(seed: u64, index: u64, input_size: usize) -> Sample {
    let l = &SYNTH_LAYOUT;
    let mut r = rng::stream(seed, &[STREAM_KEY, index]);
    let age = draw_age(&mut r);
    let t = age_fraction(age);

    let s = input_size as f64;
    let area = l.area_offset + l.area_scale * t;
    let radius = (area * s * s / std::f64::consts::PI).sqrt();
    let jitter = s / 20.0;
    let cy = s / 2.0 + r.random_range(-jitter..=jitter);
    let cx = s / 2.0 + r.random_range(-jitter..=jitter);
    let field = (l.field_offset + l.field_scale * t) as f32;
    let ramp_base = r.random_range(0.2f32..0.6);
    let ramp_slope = r.random_range(-0.2f32..0.2);
    let noise = Normal::new(0.0, l.noise_sigma).expect("positive sigma");

    let mut img = ImageTensor::zeros(3, input_size, input_size);
    for y in 0..input_size {
        for x in 0..input_size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let inside = dy * dy + dx * dx <= radius * radius;
            let red = ramp_base + ramp_slope * (x as f32 / input_size as f32);
            let green = if inside { l.disc_value } else { l.disc_background };
            for (c, base) in [red, green, field].into_iter().enumerate() {
                let v = base + noise.sample(&mut r) as f32;
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image: img,
        age: AgeLabel::new(age),
    }
}

/// `n` samples of stream `seed`, ages uniform over 1..=100.
pub fn synth_dataset(n: usize, seed: u64, input_size: usize) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    Ok(Dataset::new(
        (0..n as u64).map(|i| synth_sample(seed, i, input_size)).collect(),
    ))
}

fn to_rgb8(img: &ImageTensor) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `images/NNNNNN.png` and `manifest.csv` under `dir`; returns the manifest path.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| DataError::Io {
        path: images.clone(),
        source,
    })?;
    let mut records = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:06}.png"));
        let path = dir.join(&rel);
        to_rgb8(&sample.image).save(&path).map_err(|e| DataError::Encode {
            path: path.clone(),
            message: e.to_string(),
        })?;
        records.push(SampleRecord {
            image_path: rel,
            apparent_age: sample.age.years(),
            annotator_stddev: None,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
