//! Image loading/saving, bilinear resizing, and the stochastic augmentation
//! views that feed the two-view contrastive pipeline.

use crate::error::{Result, SpmixError};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// H x W x C float image, row-major HWC, every value in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(SpmixError::contract(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(SpmixError::contract(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SpmixError::contract(
                "image values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        ImageTensor::new(height, width, channels, vec![v; height * width * channels])
            .expect("constant in range")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub(crate) fn set_pixel(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luminance as (R + G + B) / 3, or the channel itself for grayscale.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    /// Duplicates a grayscale image to the requested channel count.
    pub fn ensure_channels(&self, channels: usize) -> Result<ImageTensor> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        match (self.channels, channels) {
            (1, 3) => {
                let mut data = Vec::with_capacity(self.data.len() * 3);
                for &v in &self.data {
                    data.extend_from_slice(&[v, v, v]);
                }
                ImageTensor::new(self.height, self.width, 3, data)
            }
            _ => Err(SpmixError::contract(format!(
                "cannot convert {} channels to {channels}",
                self.channels
            ))),
        }
    }

    /// Bilinear resize (half-pixel centers, clamped edges). Uses the lerp
    /// form `a + t*(b-a)` so constant images survive exactly.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0.0; height * width * self.channels];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for oy in 0..height {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..width {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let p00 = self.pixel(y0, x0, c);
                    let p01 = self.pixel(y0, x1, c);
                    let p10 = self.pixel(y1, x0, c);
                    let p11 = self.pixel(y1, x1, c);
                    let top = p00 + tx * (p01 - p00);
                    let bot = p10 + tx * (p11 - p10);
                    let v = top + ty * (bot - top);
                    out[(oy * width + ox) * self.channels + c] = v.clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels: self.channels,
            data: out,
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(SpmixError::contract(format!(
                "crop {y0},{x0} {height}x{width} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageTensor {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn hflip(&self) -> ImageTensor {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set_pixel(y, x, c, self.pixel(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// 8-bit quantization with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Stochastic view parameters for contrastive augmentation.
#[derive(Clone, Debug)]
pub struct AugmentationPolicy {
    /// Area fraction range for the random crop; (1.0, 1.0) disables cropping.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    /// Brightness/contrast jitter amplitude; 0 disables jitter.
    pub jitter: f64,
    /// Base seed recorded with the policy; callers derive per-view rngs.
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            hflip_prob: 0.0,
            jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SpmixError::contract(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(SpmixError::contract("flip probability must be in [0,1]"));
        }
        if self.jitter < 0.0 {
            return Err(SpmixError::contract("jitter amplitude must be >= 0"));
        }
        Ok(())
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: (0.6, 1.0),
            hflip_prob: 0.5,
            jitter: 0.2,
            seed: 0,
        }
    }
}

/// One stochastic view: random resized crop, horizontal flip, then
/// brightness/contrast jitter, clamped back to [0, 1]. Deterministic for a
/// given rng state; a fully disabled policy is the exact identity.
pub fn augment_view(
    image: &ImageTensor,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    policy.validate()?;
    let (h, w) = (image.height, image.width);
    let mut out = if policy.crop_scale == (1.0, 1.0) {
        image.clone()
    } else {
        let scale = rng.random_range(policy.crop_scale.0..=policy.crop_scale.1);
        let side_h = ((scale.sqrt() * h as f64).round() as usize).clamp(1, h);
        let side_w = ((scale.sqrt() * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.random_range(0..=h - side_h);
        let x0 = rng.random_range(0..=w - side_w);
        image.crop(y0, x0, side_h, side_w)?.resize(h, w)
    };
    if policy.hflip_prob > 0.0 && rng.random_range(0.0..1.0) < policy.hflip_prob {
        out = out.hflip();
    }
    if policy.jitter > 0.0 {
        let brightness = rng.random_range(-policy.jitter..=policy.jitter);
        let contrast = rng.random_range(1.0 - policy.jitter..=1.0 + policy.jitter);
        for v in out.data.iter_mut() {
            *v = (((*v - 0.5) * contrast + 0.5) + brightness).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Decodes a PNG or JPEG, converts to [0,1] floats, and bilinearly resizes
/// to `target_size` x `target_size` when given.
pub fn load_image(path: &Path, target_size: Option<usize>) -> Result<ImageTensor> {
    let raw = std::fs::read(path).map_err(|e| SpmixError::io(path, e))?;
    let decoded = image::load_from_memory(&raw).map_err(|e| SpmixError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let tensor = match decoded {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let data = gray.pixels().map(|p| p[0] as f64 / 255.0).collect();
            ImageTensor::new(h as usize, w as usize, 1, data)?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb
                .pixels()
                .flat_map(|p| p.0.iter().map(|&v| v as f64 / 255.0))
                .collect();
            ImageTensor::new(h as usize, w as usize, 3, data)?
        }
    };
    Ok(match target_size {
        Some(size) => tensor.resize(size, size),
        None => tensor,
    })
}

/// Writes an 8-bit PNG (grayscale or RGB depending on channel count).
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = image.to_u8();
    let (w, h) = (image.width as u32, image.height as u32);
    let result = match image.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save(path),
        _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save(path),
    };
    result.map_err(|e| SpmixError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn checker2x2() -> ImageTensor {
        ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 0.25, 0.75]).unwrap()
    }

    #[test]
    fn constant_image_survives_resize_exactly() {
        let img = ImageTensor::filled(2, 2, 3, 1.0);
        let big = img.resize(224, 224);
        assert!(big.data().iter().all(|&v| v == 1.0));
        let odd = ImageTensor::filled(5, 7, 1, 0.37);
        let r = odd.resize(13, 3);
        assert!(r.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = checker2x2();
        assert_eq!(img.resize(2, 2).data(), img.data());
    }

    #[test]
    fn disabled_policy_is_identity() {
        let img = checker2x2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment_view(&img, &AugmentationPolicy::identity(), &mut rng).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn forced_flip_reverses_columns() {
        let img = checker2x2();
        let policy = AugmentationPolicy {
            crop_scale: (1.0, 1.0),
            hflip_prob: 1.0,
            jitter: 0.0,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment_view(&img, &policy, &mut rng).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.75, 0.25]);
    }

    #[test]
    fn same_seed_same_view() {
        let img = ImageTensor::new(
            8,
            8,
            3,
            (0..192).map(|i| (i % 97) as f64 / 96.0).collect(),
        )
        .unwrap();
        let policy = AugmentationPolicy::default();
        let a = augment_view(&img, &policy, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment_view(&img, &policy, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn augment_stays_in_range() {
        let img = ImageTensor::new(
            16,
            16,
            3,
            (0..768).map(|i| (i % 53) as f64 / 52.0).collect(),
        )
        .unwrap();
        let policy = AugmentationPolicy {
            crop_scale: (0.3, 1.0),
            hflip_prob: 0.5,
            jitter: 0.9,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = augment_view(&img, &policy, &mut rng).unwrap();
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(out.height(), 16);
            assert_eq!(out.width(), 16);
        }
    }

    #[test]
    fn png_roundtrip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageTensor::new(
            4,
            4,
            3,
            (0..48).map(|i| i as f64 / 47.0).collect(),
        )
        .unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path, None).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn white_png_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        save_image(&ImageTensor::filled(2, 2, 3, 1.0), &path).unwrap();
        let img = load_image(&path, Some(8)).unwrap();
        assert_eq!(img.height(), 8);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grayscale_png_duplicates_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        save_image(&ImageTensor::new(2, 2, 1, vec![0.0, 0.2, 0.4, 1.0]).unwrap(), &path).unwrap();
        let img = load_image(&path, None).unwrap();
        assert_eq!(img.channels(), 1);
        let rgb = img.ensure_channels(3).unwrap();
        assert_eq!(rgb.channels(), 3);
        for y in 0..2 {
            for x in 0..2 {
                let v = img.pixel(y, x, 0);
                assert_eq!(rgb.pixel(y, x, 0), v);
                assert_eq!(rgb.pixel(y, x, 1), v);
                assert_eq!(rgb.pixel(y, x, 2), v);
            }
        }
    }

    #[test]
    fn missing_file_is_io_error_with_path() {
        let err = load_image(Path::new("/nonexistent/img.png"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.png"));
    }
}
