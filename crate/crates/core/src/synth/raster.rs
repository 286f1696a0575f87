use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Point, Scene, BACKGROUND_CEILING};
use crate::error::{Error, Result};

/// Channel-major `(channels, height, width)` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    pub fn get(&self, c: u32, x: u32, y: u32) -> f32 {
        self.data[((c * self.height + y) * self.width + x) as usize]
    }

    pub fn set(&mut self, c: u32, x: u32, y: u32, v: f32) {
        self.data[((c * self.height + y) * self.width + x) as usize] = v;
    }

    /// Writes the first channel as 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let plane = (self.width * self.height) as usize;
        let bytes: Vec<u8> = self.data[..plane]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width, self.height, image::ColorType::L8).map_err(
            |source| Error::Image {
                path: path.to_path_buf(),
                source,
            },
        )
    }

    pub fn load_png(path: &Path, channels: u32) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (width, height) = img.dimensions();
        let plane: Vec<f32> = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        let mut data = Vec::with_capacity(plane.len() * channels as usize);
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Quantizes to the 8-bit levels a PNG round trip would produce.
    pub fn quantized(&self) -> Self {
        Self {
            data: self
                .data
                .iter()
                .map(|&v| f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

const DISC_BASE: f64 = 0.55;
const DISC_PEAK: f64 = 0.1;

/// Renders a scene: vignetted noisy background, bright optic disc, dark fovea
/// and flat bright exudate disks. Deterministic in the scene.
pub fn rasterize(scene: &Scene, channels: u32) -> Image {
    let (w, h) = (scene.width, scene.height);
    let mut img = Image::zeros(w, h, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.background_seed);
    let center = Point::new((f64::from(w) - 1.0) / 2.0, (f64::from(h) - 1.0) / 2.0);
    let vignette_r2 = (0.6 * f64::from(w.min(h))).powi(2);
    let disc_r = scene.disc_diameter / 2.0;
    let fovea_r = (scene.disc_diameter / 4.0).max(1.5);
    for y in 0..h {
        for x in 0..w {
            let p = Point::new(f64::from(x), f64::from(y));
            let fall = (1.0 - p.dist2(center) / vignette_r2).max(0.0);
            let noise = (rng.random::<f64>() - 0.5) * 0.08;
            let mut v = (0.10 + 0.20 * fall + noise).clamp(0.0, BACKGROUND_CEILING);
            let dd = p.dist(scene.disc_center);
            if dd <= disc_r {
                v = v.max(DISC_BASE + DISC_PEAK * (1.0 - dd / disc_r));
            }
            let df = p.dist(scene.fovea_center);
            if df <= fovea_r {
                v *= 0.3 + 0.7 * df / fovea_r;
            }
            for b in &scene.exudates {
                if p.dist2(b.center) <= b.radius * b.radius {
                    v = v.max(b.intensity);
                }
            }
            for c in 0..channels {
                img.set(c, x, y, v as f32);
            }
        }
    }
    img
}
