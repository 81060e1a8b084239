//! Images as functions from pixel position to pixel colour.
//!
//! Pixel `(row, col)` of an `H x W` image maps to `x = (2 row / (H - 1) - 1, 2 col / (W - 1) - 1)`
//! and `y` holds the channel values standardized with per-channel statistics of the whole
//! set. Images are 8-bit RGB; other PNG colour types are converted on load.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ParamStore, Real};
use crate::error::{Error, Result};
use crate::funcdata::{apply_noise, NoiseSpec, Phase, PointSet, Setup, TaskBatch};
use crate::models::Model;

pub const CHANNELS: usize = 3;

/// Per-channel mean and standard deviation of raw 0..=255 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl NormStats {
    pub fn from_images(images: &[RgbImage]) -> Result<Self> {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut n = 0usize;
        for img in images {
            for p in img.pixels() {
                for c in 0..CHANNELS {
                    let v = p.0[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Config("no pixels to compute statistics from".into()));
        }
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / n as f64;
            // a constant channel keeps unit scale rather than dividing by zero
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c])
                .max(0.0)
                .sqrt()
                .max(1e-6);
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, c: usize, v: u8) -> f64 {
        (v as f64 - self.mean[c]) / self.std[c]
    }

    /// Inverse of [`NormStats::normalize`], rounded and clamped to 0..=255.
    pub fn denormalize(&self, c: usize, y: f64) -> u8 {
        (y * self.std[c] + self.mean[c]).round().clamp(0.0, 255.0) as u8
    }
}

/// Pixel coordinates of an `h x w` grid, row-major, two columns each.
pub fn pixel_grid(h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut x = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            x.push(coord(r, h));
            x.push(coord(c, w));
        }
    }
    x
}

pub fn image_to_function(img: &RgbImage, stats: &NormStats) -> PointSet {
    let (w, h) = img.dimensions();
    let y = img
        .pixels()
        .flat_map(|p| (0..CHANNELS).map(move |c| stats.normalize(c, p.0[c])))
        .collect();
    PointSet {
        dim_x: 2,
        dim_y: CHANNELS,
        x: pixel_grid(h as usize, w as usize),
        y,
    }
}

/// Rebuilds an image from per-pixel values in grid order.
pub fn values_to_image(y: &[f64], h: usize, w: usize, stats: &NormStats) -> Result<RgbImage> {
    if y.len() != h * w * CHANNELS {
        return Err(Error::Shape(format!(
            "{} values for a {h}x{w} image",
            y.len()
        )));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let i = (r as usize * w + c as usize) * CHANNELS;
        Rgb([
            stats.denormalize(0, y[i]),
            stats.denormalize(1, y[i + 1]),
            stats.denormalize(2, y[i + 2]),
        ])
    }))
}

pub fn function_to_image(
    points: &PointSet,
    h: usize,
    w: usize,
    stats: &NormStats,
) -> Result<RgbImage> {
    if points.dim_x != 2 || points.dim_y != CHANNELS || points.len() != h * w {
        return Err(Error::Shape(format!(
            "point set does not describe a {h}x{w} RGB image"
        )));
    }
    values_to_image(&points.y, h, w, stats)
}

/// A set of equally sized images with shared normalization.
#[derive(Debug, Clone)]
pub struct ImageFunctionSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<RgbImage>,
    pub names: Vec<String>,
    pub stats: NormStats,
}

impl ImageFunctionSet {
    /// Uses the set's own statistics.
    pub fn new(images: Vec<RgbImage>, names: Vec<String>) -> Result<Self> {
        let stats = NormStats::from_images(&images)?;
        Self::with_stats(images, names, stats)
    }

    /// Reuses statistics, e.g. those of a training set for a test set.
    pub fn with_stats(images: Vec<RgbImage>, names: Vec<String>, stats: NormStats) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("empty image set".into()))?;
        let (w, h) = first.dimensions();
        if images.iter().any(|i| i.dimensions() != (w, h)) {
            return Err(Error::Shape("images in a set must share dimensions".into()));
        }
        if names.len() != images.len() {
            return Err(Error::Shape("one name per image is required".into()));
        }
        Ok(ImageFunctionSet {
            height: h as usize,
            width: w as usize,
            images,
            names,
            stats,
        })
    }

    /// Every PNG in `dir`, sorted by file name, resized to `size x size`.
    pub fn load_dir(dir: &Path, size: u32) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no PNG images in {}", dir.display())));
        }
        let mut images = Vec::with_capacity(paths.len());
        let mut names = Vec::with_capacity(paths.len());
        for p in &paths {
            let img = image::open(p)?.to_rgb8();
            let img = if img.dimensions() == (size, size) {
                img
            } else {
                image::imageops::resize(&img, size, size, FilterType::Triangle)
            };
            images.push(img);
            names.push(
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Self::new(images, names)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn function(&self, i: usize) -> PointSet {
        image_to_function(&self.images[i], &self.stats)
    }
}

/// Context and target sizes for image tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageTaskConfig {
    pub num_ctx: usize,
    /// Remaining pixels when absent.
    #[serde(default)]
    pub num_tar: Option<usize>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    16
}

/// A batch of completion tasks on random images with disjoint random pixel subsets.
pub fn sample_image_task<R: Rng + ?Sized>(
    set: &ImageFunctionSet,
    cfg: &ImageTaskConfig,
    setup: Setup,
    phase: Phase,
    rng: &mut R,
) -> Result<TaskBatch> {
    let total = set.pixels();
    let n_ctx = cfg.num_ctx;
    let n_tar = cfg.num_tar.unwrap_or(total.saturating_sub(n_ctx));
    if n_ctx + n_tar > total {
        return Err(Error::Config(format!(
            "{n_ctx} context plus {n_tar} target pixels exceed {total}"
        )));
    }
    if n_tar == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "image tasks need targets and a positive batch size".into(),
        ));
    }
    let (noisy_ctx, noisy_tar) = setup.noise_placement(phase);
    let mut tasks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let img = rng.random_range(0..set.images.len());
        let f = set.function(img);
        let idx = index::sample(rng, total, n_ctx + n_tar).into_vec();
        let ctx = f.select(&idx[..n_ctx]);
        let tar = f.select(&idx[n_ctx..]);
        tasks.push(apply_noise(
            ctx, tar, &cfg.noise, noisy_ctx, noisy_tar, None, 0.0, rng,
        )?);
    }
    Ok(TaskBatch {
        setup,
        phase,
        tasks,
    })
}

/// A rendered prediction over every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub image: RgbImage,
    /// Mean predictive std per pixel (normalized units, averaged over channels).
    pub std_map: Vec<f64>,
}

impl Render {
    /// The std map scaled to 0..=255 against `max_std`.
    pub fn std_image(&self, h: usize, w: usize, max_std: f64) -> RgbImage {
        RgbImage::from_fn(w as u32, h as u32, |c, r| {
            let v = (self.std_map[r as usize * w + c as usize] / max_std * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8;
            Rgb([v, v, v])
        })
    }
}

/// Averages prediction sets `(mean, std)` over samples and de-normalizes.
pub fn render_predictions(
    preds: &[(Vec<f64>, Vec<f64>)],
    h: usize,
    w: usize,
    stats: &NormStats,
) -> Result<Render> {
    let n = h * w * CHANNELS;
    if preds.is_empty() || preds.iter().any(|(m, s)| m.len() != n || s.len() != n) {
        return Err(Error::Shape(format!(
            "predictions do not cover a {h}x{w} image"
        )));
    }
    let k = preds.len() as f64;
    let mean: Vec<f64> = (0..n)
        .map(|i| preds.iter().map(|(m, _)| m[i]).sum::<f64>() / k)
        .collect();
    let std_map = (0..h * w)
        .map(|p| {
            preds
                .iter()
                .map(|(_, s)| s[p * CHANNELS..(p + 1) * CHANNELS].iter().sum::<f64>())
                .sum::<f64>()
                / (k * CHANNELS as f64)
        })
        .collect();
    Ok(Render {
        image: values_to_image(&mean, h, w, stats)?,
        std_map,
    })
}

/// Queries every pixel given `ctx`, averaging over `k` latent samples (or members).
pub fn render_prediction<T: Real, R: Rng + ?Sized>(
    model: &Model,
    params: &ParamStore<T>,
    set: &ImageFunctionSet,
    ctx: &PointSet,
    k: usize,
    rng: &mut R,
) -> Result<Render> {
    let grid = pixel_grid(set.height, set.width);
    let preds = model.predict(params, ctx, &grid, k.max(1), rng)?;
    render_predictions(&preds, set.height, set.width, &set.stats)
}

/// The observed context drawn on a grey canvas, as in completion figures.
pub fn context_image(ctx: &PointSet, h: usize, w: usize, stats: &NormStats) -> RgbImage {
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([96, 96, 128]));
    for i in 0..ctx.len() {
        let x = ctx.x_at(i);
        let r = ((x[0] + 1.0) / 2.0 * (h - 1) as f64).round() as u32;
        let c = ((x[1] + 1.0) / 2.0 * (w - 1) as f64).round() as u32;
        let y = ctx.y_at(i);
        img.put_pixel(
            c,
            r,
            Rgb([
                stats.denormalize(0, y[0]),
                stats.denormalize(1, y[1]),
                stats.denormalize(2, y[2]),
            ]),
        );
    }
    img
}

/// Panels side by side with a `gap`-pixel white separator.
pub fn compose_strip(panels: &[RgbImage], gap: u32) -> Result<RgbImage> {
    let h = panels
        .iter()
        .map(|p| p.height())
        .max()
        .ok_or_else(|| Error::Config("no panels to compose".into()))?;
    let w: u32 = panels.iter().map(|p| p.width()).sum::<u32>() + gap * (panels.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    Ok(out)
}
