//! Synthetic fundus-like images with vessel-like curves, for self-contained
//! training and testing.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vesselseg::imageio::{write_pnm_file, RasterImage};

use crate::manifest::{Manifest, Record};

pub const NOISE_SIGMA: f64 = 8.0;
pub const MIN_SIDE: usize = 64;
pub const VESSEL_FRACTION: (f64, f64) = (0.05, 0.25);
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 20,
            width: 128,
            height: 128,
            seed: 0,
        }
    }
}

/// One generated image with its reference and FOV.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub rgb: RasterImage,
    pub truth: RasterImage,
    pub fov: RasterImage,
    /// Share of FOV pixels labelled vessel.
    pub vessel_fraction: f64,
}

fn inscribed_circle(width: usize, height: usize) -> Vec<bool> {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let r = width.min(height) as f64 / 2.0;
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r))
        .collect()
}

fn bezier(p: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

/// Stamps a curve's Gaussian cross-profile into `weight` (max-combined).
/// A curve of width `w` has profile weight ≥ 0.5 within `w/2` of its centre line.
fn draw_curve(weight: &mut [f64], width: usize, height: usize, ctrl: &[(f64, f64); 4], vessel_width: f64) {
    let sigma = (vessel_width / 2.0) / (2.0 * std::f64::consts::LN_2).sqrt();
    let reach = (3.0 * sigma).ceil() as isize + 1;
    let polygon: f64 = (0..3)
        .map(|i| ((ctrl[i + 1].0 - ctrl[i].0).powi(2) + (ctrl[i + 1].1 - ctrl[i].1).powi(2)).sqrt())
        .sum();
    // spacing of at most a quarter pixel along the curve
    let steps = (polygon * 4.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let (px, py) = bezier(ctrl, s as f64 / steps as f64);
        let (ix, iy) = (px.round() as isize, py.round() as isize);
        for y in (iy - reach).max(0)..=(iy + reach).min(height as isize - 1) {
            for x in (ix - reach).max(0)..=(ix + reach).min(width as isize - 1) {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut weight[y as usize * width + x as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

fn attempt<R: Rng>(width: usize, height: usize, fov: &[bool], rng: &mut R) -> SynthImage {
    let (w, h) = (width as f64, height as f64);
    let n_curves = rng.random_range(6..=12);
    let mut weight = vec![0.0f64; width * height];
    let mut contrast = vec![0.0f64; width * height];
    for _ in 0..n_curves {
        let ctrl: [(f64, f64); 4] =
            std::array::from_fn(|_| (rng.random_range(-0.1 * w..1.1 * w), rng.random_range(-0.1 * h..1.1 * h)));
        let vessel_width = f64::from(rng.random_range(1..=6u8));
        let gain = rng.random_range(45.0..90.0);
        let mut single = vec![0.0; width * height];
        draw_curve(&mut single, width, height, &ctrl, vessel_width);
        for i in 0..single.len() {
            weight[i] = weight[i].max(single[i]);
            contrast[i] = contrast[i].max(gain * single[i]);
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let (cx, cy) = (w / 2.0, h / 2.0);
    let mut rgb = Vec::with_capacity(3 * width * height);
    let mut truth = Vec::with_capacity(width * height);
    let mut positives = 0usize;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            // gentle illumination falloff towards the rim
            let r2 = ((x as f64 - cx) / w).powi(2) + ((y as f64 - cy) / h).powi(2);
            let base = if fov[i] { 70.0 - 40.0 * r2 } else { 4.0 };
            let q = |v: f64| v.round().clamp(0.0, 255.0) as u16;
            let green = base + contrast[i] + noise.sample(rng);
            let red = 2.0 * base + 0.3 * contrast[i] + noise.sample(rng);
            let blue = 0.3 * base + noise.sample(rng);
            rgb.extend([q(red), q(green), q(blue)]);
            let vessel = fov[i] && weight[i] >= 0.5;
            positives += usize::from(vessel);
            truth.push(if vessel { 255 } else { 0 });
        }
    }
    let inside = fov.iter().filter(|&&b| b).count();
    SynthImage {
        rgb: RasterImage::new(width, height, 3, 8, rgb).expect("consistent raster"),
        truth: RasterImage::new(width, height, 1, 8, truth).expect("consistent raster"),
        fov: RasterImage::new(
            width,
            height,
            1,
            8,
            fov.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("consistent raster"),
        vessel_fraction: positives as f64 / inside as f64,
    }
}

/// Generates image `index` of a corpus. Draws are redone until the vessel
/// fraction inside the FOV falls in [`VESSEL_FRACTION`].
pub fn generate_image(config: &SynthConfig, index: usize) -> Result<SynthImage> {
    if config.width < MIN_SIDE || config.height < MIN_SIDE {
        bail!("synthetic images must be at least {MIN_SIDE}x{MIN_SIDE}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let fov = inscribed_circle(config.width, config.height);
    for _ in 0..MAX_ATTEMPTS {
        let img = attempt(config.width, config.height, &fov, &mut rng);
        if (VESSEL_FRACTION.0..=VESSEL_FRACTION.1).contains(&img.vessel_fraction) {
            return Ok(img);
        }
    }
    bail!("no draw reached the target vessel fraction after {MAX_ATTEMPTS} attempts")
}

/// Writes `count` images with truth and FOV masks plus `manifest.tsv` into `out`.
pub fn generate(config: &SynthConfig, out: &Path) -> Result<Manifest> {
    if config.count == 0 {
        bail!("count must be at least 1");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let digits = (config.count - 1).to_string().len().max(2);
    let mut records = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let img = generate_image(config, i)?;
        let stem = format!("syn_{i:0digits$}");
        let rec = Record {
            image: out.join(format!("{stem}.ppm")),
            truth: out.join(format!("{stem}_truth.pgm")),
            fov: out.join(format!("{stem}_fov.pgm")),
            stratum: if i % 2 == 0 { "a" } else { "b" }.to_string(),
        };
        write_pnm_file(&rec.image, &img.rgb)?;
        write_pnm_file(&rec.truth, &img.truth)?;
        write_pnm_file(&rec.fov, &img.fov)?;
        records.push(rec);
    }
    let manifest = Manifest { records };
    let path = out.join("manifest.tsv");
    fs::write(&path, manifest.to_text(Some(out))).with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}
