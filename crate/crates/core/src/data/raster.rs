use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Gray {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(SemcError::Shape(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => SemcError::io(path, io),
            other => SemcError::Data(format!("cannot decode {}: {other}", path.display())),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let pixels = luma
            .into_raw()
            .into_iter()
            .map(|p| p as f32 / 255.0)
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
                .ok_or_else(|| SemcError::Shape("pixel buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => SemcError::io(path, io),
            other => SemcError::Data(format!("cannot encode {}: {other}", path.display())),
        })
    }

    /// Bilinear resize to `size × size`; a no-op when already that size.
    pub fn resize(&self, size: usize) -> Self {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("pixel count checked at construction");
        let out = imageops::resize(
            &buf,
            size as u32,
            size as u32,
            imageops::FilterType::Triangle,
        );
        Self {
            width: size,
            height: size,
            pixels: out.into_raw(),
        }
    }

    pub fn hflip(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            pixels,
            ..self.clone()
        }
    }

    pub fn vflip(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width).rev() {
            pixels.extend_from_slice(row);
        }
        Self {
            pixels,
            ..self.clone()
        }
    }

    /// Rotation about the image centre with bilinear sampling; uncovered
    /// pixels are filled with zero.
    pub fn rotate(&self, degrees: f64) -> Self {
        if degrees == 0.0 {
            return self.clone();
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut pixels = vec![0.0f32; self.pixels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                pixels[y * self.width + x] = self.sample(sx, sy);
            }
        }
        Self {
            pixels,
            ..self.clone()
        }
    }

    fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let at = |xi: f64, yi: f64| -> f32 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| p * factor).collect(),
            ..self.clone()
        }
    }

    pub fn clip(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Rotation angle drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Multiplicative brightness factor drawn from `[lo, hi]`.
    pub brightness: (f64, f64),
    pub size: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            brightness: (0.8, 1.2),
            size: 512,
        }
    }
}

impl AugmentPolicy {
    pub fn identity(size: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            brightness: (1.0, 1.0),
            size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.rotation_deg >= 0.0) {
            return Err(SemcError::Config(format!(
                "rotation range must be >= 0, got {}",
                self.rotation_deg
            )));
        }
        if !p_ok(self.hflip_p) || !p_ok(self.vflip_p) {
            return Err(SemcError::Config(
                "flip probabilities must lie in [0,1]".into(),
            ));
        }
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi) {
            return Err(SemcError::Config(format!(
                "brightness range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.size == 0 {
            return Err(SemcError::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Resize, then random rotation, flips and brightness, then clip to `[0,1]`.
/// The same `seed` always yields the same output.
pub fn augment(img: &Gray, policy: &AugmentPolicy, seed: u64) -> Gray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(-1.0..=1.0) * policy.rotation_deg;
    let hflip = rng.random::<f64>() < policy.hflip_p;
    let vflip = rng.random::<f64>() < policy.vflip_p;
    let (lo, hi) = policy.brightness;
    let factor = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let mut out = img.resize(policy.size).rotate(angle);
    if hflip {
        out = out.hflip();
    }
    if vflip {
        out = out.vflip();
    }
    if factor != 1.0 {
        out = out.scale(factor as f32);
    }
    out.clip()
}

/// Order-independent per-sample seed.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stacks equally sized images into a (B, 1, H, W) tensor.
pub fn to_batch(images: &[Gray], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| SemcError::Data("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut flat = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(SemcError::Shape(format!(
                "mixed image sizes {}×{} and {w}×{h}",
                img.width, img.height
            )));
        }
        flat.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}
