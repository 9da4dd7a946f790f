//! Static center-surround saliency detection and the per-patch mixup-ratio
//! pipeline: detect on both images, merge by elementwise max, superimpose
//! uniform noise, min-max normalize, clip at the threshold, patch-average.

use crate::error::{Result, SpmixError};
use crate::imaging::{save_image, ImageTensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Default window sizes for the multi-scale center-surround detector.
pub const DEFAULT_WINDOWS: [usize; 3] = [9, 25, 49];

/// Per-pixel nonnegative saliency scores; `normalized` means values have
/// been min-max mapped into [0, 1].
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(SpmixError::contract(format!(
                "saliency values length {} does not match {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(SpmixError::contract(
                "saliency values must be finite and >= 0".to_string(),
            ));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Flat index of the maximum value (first occurrence on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Bilinear resize of the score field. Raw maps can exceed 1.0, which
    /// `ImageTensor` rejects, so the floats are resized directly.
    pub fn resize(&self, height: usize, width: usize) -> SaliencyMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = vec![0.0; height * width];
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
                let p00 = self.at(y0, x0);
                let p01 = self.at(y0, x1);
                let p10 = self.at(y1, x0);
                let p11 = self.at(y1, x1);
                let top = p00 + tx * (p01 - p00);
                let bot = p10 + tx * (p11 - p10);
                out[oy * width + ox] = (top + ty * (bot - top)).max(0.0);
            }
        }
        SaliencyMap {
            height,
            width,
            values: out,
            normalized: self.normalized,
        }
    }
}

/// G x G per-patch mixup ratios, each in [0, alpha].
#[derive(Clone, Debug)]
pub struct PatchRatioGrid {
    grid: usize,
    alpha: f64,
    ratios: Vec<f64>,
}

impl PatchRatioGrid {
    pub fn new(grid: usize, alpha: f64, ratios: Vec<f64>) -> Result<Self> {
        check_alpha(alpha)?;
        if ratios.len() != grid * grid {
            return Err(SpmixError::contract(format!(
                "ratio grid length {} does not match {grid}x{grid}",
                ratios.len()
            )));
        }
        if ratios.iter().any(|&r| r < 0.0 || r > alpha + 1e-12) {
            return Err(SpmixError::contract(format!(
                "patch ratios must lie in [0, {alpha}]"
            )));
        }
        Ok(PatchRatioGrid { grid, alpha, ratios })
    }

    /// Constant grid; `ratio == 1` is the unmixed identity used for
    /// head-class samples (alpha is stored as 1 in that case).
    pub fn constant(grid: usize, ratio: f64) -> Self {
        PatchRatioGrid {
            grid,
            alpha: ratio.max(1e-9).min(1.0),
            ratios: vec![ratio; grid * grid],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.ratios[row * self.grid + col]
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SpmixError::contract(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Whether pixel-level clipping happens before or after patch averaging.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioOrder {
    ClipFirst,
    AverageFirst,
}

impl std::str::FromStr for RatioOrder {
    type Err = SpmixError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip_first" => Ok(RatioOrder::ClipFirst),
            "average_first" => Ok(RatioOrder::AverageFirst),
            other => Err(SpmixError::config(format!(
                "unknown ratio_order '{other}' (expected clip_first or average_first)"
            ))),
        }
    }
}

/// Summed-area table with one extra row/column of zeros.
struct IntegralImage {
    width: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    fn build(gray: &[f64], height: usize, width: usize) -> Self {
        let w1 = width + 1;
        let mut sums = vec![0.0; (height + 1) * w1];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += gray[y * width + x];
                sums[(y + 1) * w1 + (x + 1)] = sums[y * w1 + (x + 1)] + row;
            }
        }
        IntegralImage { width: w1, sums }
    }

    /// Sum over the inclusive pixel rectangle [y0, y1] x [x0, x1].
    fn rect_sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let w = self.width;
        self.sums[(y1 + 1) * w + (x1 + 1)] - self.sums[y0 * w + (x1 + 1)]
            - self.sums[(y1 + 1) * w + x0]
            + self.sums[y0 * w + x0]
    }
}

fn check_windows(windows: &[usize], height: usize, width: usize) -> Result<()> {
    if windows.is_empty() {
        return Err(SpmixError::contract("window list must not be empty"));
    }
    let limit = height.min(width);
    for &w in windows {
        if w % 2 == 0 || w < 3 {
            return Err(SpmixError::contract(format!(
                "window size {w} must be odd and >= 3"
            )));
        }
        if w > limit {
            return Err(SpmixError::contract(format!(
                "window size {w} exceeds image side {limit}"
            )));
        }
    }
    Ok(())
}

/// Multi-scale center-surround saliency: for each pixel, sum over window
/// sizes of |gray(p) - box mean around p|, with windows clamped at the
/// borders. Box means come from an integral image.
pub fn static_saliency(image: &ImageTensor, windows: &[usize]) -> Result<SaliencyMap> {
    let (h, w) = (image.height(), image.width());
    check_windows(windows, h, w)?;
    let gray = image.to_gray();
    let integral = IntegralImage::build(&gray, h, w);
    let mut values = vec![0.0; h * w];
    for &win in windows {
        let half = win / 2;
        for y in 0..h {
            let y0 = y.saturating_sub(half);
            let y1 = (y + half).min(h - 1);
            for x in 0..w {
                let x0 = x.saturating_sub(half);
                let x1 = (x + half).min(w - 1);
                let area = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                let mean = integral.rect_sum(y0, x0, y1, x1) / area;
                values[y * w + x] += (gray[y * w + x] - mean).abs();
            }
        }
    }
    SaliencyMap::new(h, w, values)
}

/// Elementwise maximum of two maps of identical dimensions.
pub fn merge_saliency(a: &SaliencyMap, b: &SaliencyMap) -> Result<SaliencyMap> {
    if a.height != b.height || a.width != b.width {
        return Err(SpmixError::contract(format!(
            "saliency dimensions differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| x.max(y))
        .collect();
    Ok(SaliencyMap {
        height: a.height,
        width: a.width,
        values,
        normalized: false,
    })
}

/// Adds per-pixel uniform noise in [0, amplitude].
pub fn add_noise(map: &SaliencyMap, amplitude: f64, rng: &mut ChaCha8Rng) -> Result<SaliencyMap> {
    if amplitude < 0.0 {
        return Err(SpmixError::contract(format!(
            "noise amplitude must be >= 0, got {amplitude}"
        )));
    }
    if amplitude == 0.0 {
        return Ok(map.clone());
    }
    let values = map
        .values
        .iter()
        .map(|&v| (v + rng.random_range(0.0..=amplitude)).max(0.0))
        .collect();
    Ok(SaliencyMap {
        height: map.height,
        width: map.width,
        values,
        normalized: false,
    })
}

/// Min-max normalization to [0, 1]. A constant map becomes all 0.5 so that
/// degenerate pairs still keep roughly half of the tail sample.
pub fn minmax_normalize(map: &SaliencyMap) -> SaliencyMap {
    let min = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let range = max - min;
        map.values.iter().map(|&v| (v - min) / range).collect()
    } else {
        vec![0.5; map.values.len()]
    };
    SaliencyMap {
        height: map.height,
        width: map.width,
        values,
        normalized: true,
    }
}

/// Per-patch mixup ratios from a normalized merged map: clip each pixel at
/// `alpha` then average within each of the G x G non-overlapping patches
/// (or average first under [`RatioOrder::AverageFirst`]). Maps whose sides
/// are not divisible by G are bilinearly resized up to the next multiple.
pub fn patch_ratios(
    map: &SaliencyMap,
    grid: usize,
    alpha: f64,
    order: RatioOrder,
) -> Result<PatchRatioGrid> {
    check_alpha(alpha)?;
    if grid == 0 {
        return Err(SpmixError::contract("grid side must be >= 1"));
    }
    let target_h = grid * map.height.div_ceil(grid);
    let target_w = grid * map.width.div_ceil(grid);
    let map = if target_h != map.height || target_w != map.width {
        map.resize(target_h, target_w)
    } else {
        map.clone()
    };
    let (ph, pw) = (map.height / grid, map.width / grid);
    let mut ratios = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut sum = 0.0;
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    let v = map.at(y, x);
                    sum += match order {
                        RatioOrder::ClipFirst => v.min(alpha),
                        RatioOrder::AverageFirst => v,
                    };
                }
            }
            let mean = sum / (ph * pw) as f64;
            ratios.push(match order {
                RatioOrder::ClipFirst => mean,
                RatioOrder::AverageFirst => mean.min(alpha),
            });
        }
    }
    // clamp away accumulated rounding just above alpha
    for r in ratios.iter_mut() {
        *r = r.clamp(0.0, alpha);
    }
    PatchRatioGrid::new(grid, alpha, ratios)
}

/// Knobs for the full tail/head ratio pipeline.
#[derive(Clone, Debug)]
pub struct RatioPipeline {
    pub windows: Vec<usize>,
    pub noise_amplitude: f64,
    pub grid: usize,
    pub alpha: f64,
    pub order: RatioOrder,
}

impl RatioPipeline {
    pub fn new(windows: Vec<usize>, noise_amplitude: f64, grid: usize, alpha: f64) -> Self {
        RatioPipeline {
            windows,
            noise_amplitude,
            grid,
            alpha,
            order: RatioOrder::ClipFirst,
        }
    }

    /// saliency(tail), saliency(head) -> merge -> noise -> normalize ->
    /// clip/patch-average. With zero noise this is a pure function of the
    /// two views.
    pub fn ratios_for_pair(
        &self,
        tail_view: &ImageTensor,
        head_view: &ImageTensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<PatchRatioGrid> {
        let s_t = static_saliency(tail_view, &self.windows)?;
        let s_h = static_saliency(head_view, &self.windows)?;
        let merged = merge_saliency(&s_t, &s_h)?;
        let noisy = add_noise(&merged, self.noise_amplitude, rng)?;
        let normalized = minmax_normalize(&noisy);
        patch_ratios(&normalized, self.grid, self.alpha, self.order)
    }
}

/// Writes a saliency map as a grayscale PNG, scaling [0,1] to [0,255] with
/// round-half-up. Values above 1 (raw maps) are clamped.
pub fn save_saliency(map: &SaliencyMap, path: &Path) -> Result<()> {
    let img = ImageTensor::new(
        map.height,
        map.width,
        1,
        map.values.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    )?;
    save_image(&img, path)
}
