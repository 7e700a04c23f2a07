//! Procedural texture corpus: each class is a sinusoidal grating with its own
//! orientation and frequency, perturbed per image by jitter, phase, a colour
//! cast and pixel noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::encode_ppm;
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed;

/// Orientation (radians in `[0, pi)`) and frequency (cycles per image width) of class `k` of `classes`.
pub fn class_grating(k: usize, classes: usize) -> (f64, f64) {
    let theta = PI * k as f64 / classes as f64;
    let cycles = 4.0 + 3.0 * (k % 3) as f64;
    (theta, cycles)
}

/// 8-bit RGB pixels of one image.
pub fn synth_image(k: usize, classes: usize, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let (theta, cycles) = class_grating(k, classes);
    let theta = theta + rng.gen_range(-4.0..4.0f64).to_radians();
    let cycles = cycles * rng.gen_range(0.95..1.05);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.3..0.45);
    let cast: [f64; 3] = [rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15)];
    let noise = Normal::new(0.0, 0.08).expect("positive std");
    let (c, s) = (theta.cos(), theta.sin());
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * c + y as f64 * s) / size as f64;
            let v = 0.5 + contrast * (2.0 * PI * cycles * t + phase).sin();
            for ch in cast {
                let p = (v * ch + noise.sample(rng)).clamp(0.0, 1.0);
                rgb.push((p * 255.0).round() as u8);
            }
        }
    }
    rgb
}

/// Writes `per_class` images of each class under `dir` plus `dir/manifest.csv`.
/// The corpus is a pure function of the arguments.
pub fn synth_dataset(dir: &Path, classes: usize, per_class: usize, size: usize, base_seed: u64) -> Result<DatasetManifest> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic corpus needs at least 2 classes, got {classes}")));
    }
    if per_class == 0 || size == 0 {
        return Err(Error::Config("per_class and size must be positive".into()));
    }
    let mut records = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let name = format!("class_{k:02}");
        let class_dir = dir.join(&name);
        fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for i in 0..per_class {
            let mut rng = seed::rng(seed::derive(seed::derive(base_seed, k as u64), i as u64));
            let rel = PathBuf::from(&name).join(format!("{i:04}.ppm"));
            let path = dir.join(&rel);
            fs::write(&path, encode_ppm(size, size, &synth_image(k, classes, size, &mut rng))).map_err(|e| Error::io(&path, e))?;
            records.push((rel, name.clone()));
        }
    }
    let manifest = DatasetManifest::from_records(dir.to_path_buf(), records)?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
