//! Images, synthetic detector events, cropping, preprocessing, and dataset
//! files.

mod io;
mod synth;

pub use io::{export_pgm, load_dataset, pgm_bytes, read_dataset, save_dataset, write_dataset};
pub use synth::{rasterize_segment, synth_generate, ParticleClass, SynthImage, SynthKind, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` grid of pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    /// Position of the maximum; the first occurrence in row-major order wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, p) in self.pixels.iter().enumerate() {
            if *p > self.pixels[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    pub fn unflatten(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values)
    }

    /// Pixel space `[0, 255]` → model space `[−1, 1]`: `p / 127.5 − 1`.
    pub fn to_model_space(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p / 127.5 - 1.0).collect()
    }

    /// Inverse of [`ImageGrid::to_model_space`]; no clipping.
    pub fn from_model_space(height: usize, width: usize, x: &[f64]) -> Result<Self> {
        Self::new(height, width, x.iter().map(|v| (v + 1.0) * 127.5).collect())
    }

    pub fn clipped(&self, lo: f64, hi: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| p.clamp(lo, hi)).collect(),
        }
    }
}

/// Window of `crop_h × crop_w` centred on the brightest pixel, shifted as
/// needed to stay inside the image.
pub fn brightest_crop(img: &ImageGrid, crop_h: usize, crop_w: usize) -> Result<ImageGrid> {
    if crop_h == 0 || crop_w == 0 || crop_h > img.height || crop_w > img.width {
        return Err(Error::dim(format!(
            "cannot take a {crop_h}x{crop_w} crop of a {}x{} image",
            img.height, img.width
        )));
    }
    let (r, c) = img.argmax();
    let top = r.saturating_sub(crop_h / 2).min(img.height - crop_h);
    let left = c.saturating_sub(crop_w / 2).min(img.width - crop_w);
    let mut pixels = Vec::with_capacity(crop_h * crop_w);
    for row in top..top + crop_h {
        pixels.extend_from_slice(&img.pixels[row * img.width + left..row * img.width + left + crop_w]);
    }
    ImageGrid::new(crop_h, crop_w, pixels)
}

/// Bias subtraction followed by a dataset-global rescale to `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub bias: f64,
    pub post_bias_min: f64,
    pub post_bias_max: f64,
}

pub const DEFAULT_BIAS: f64 = 10.0;

impl PreprocessSpec {
    pub fn new(bias: f64, post_bias_min: f64, post_bias_max: f64) -> Result<Self> {
        if !(bias.is_finite() && post_bias_min.is_finite() && post_bias_max.is_finite()) {
            return Err(Error::Numeric("preprocess parameters must be finite".into()));
        }
        if !(post_bias_max > post_bias_min) {
            return Err(Error::Degenerate(format!(
                "pixel range [{post_bias_min}, {post_bias_max}] is empty"
            )));
        }
        Ok(Self {
            bias,
            post_bias_min,
            post_bias_max,
        })
    }

    /// Global min/max of `p − bias` over all images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a ImageGrid>, bias: f64) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for img in images {
            for p in &img.pixels {
                lo = lo.min(p - bias);
                hi = hi.max(p - bias);
            }
        }
        Self::new(bias, lo, hi)
    }

    fn apply_pixel(&self, p: f64) -> f64 {
        let shifted = p - self.bias;
        let unit = 2.0 * (shifted - self.post_bias_min) / (self.post_bias_max - self.post_bias_min) - 1.0;
        ((unit + 1.0) * 127.5).clamp(0.0, 255.0)
    }

    fn invert_pixel(&self, q: f64) -> f64 {
        let unit = q / 127.5 - 1.0;
        (unit + 1.0) / 2.0 * (self.post_bias_max - self.post_bias_min) + self.post_bias_min + self.bias
    }
}

/// `p' = p − bias`, `p'' = 2(p' − min)/(max − min) − 1`,
/// `p''' = (p'' + 1)·127.5`, clipped to `[0, 255]`.
pub fn preprocess(img: &ImageGrid, spec: &PreprocessSpec) -> ImageGrid {
    ImageGrid {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|p| spec.apply_pixel(*p)).collect(),
    }
}

/// Maps `[0, 255]` pixels back to raw intensities. Exact inverse of
/// [`preprocess`] wherever no clipping happened.
pub fn unpreprocess(img: &ImageGrid, spec: &PreprocessSpec) -> ImageGrid {
    ImageGrid {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|q| spec.invert_pixel(*q)).collect(),
    }
}

/// Equal-sized preprocessed images plus optional per-image labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<ImageGrid>,
    pub labels: Vec<Option<String>>,
    pub preprocess: PreprocessSpec,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<ImageGrid>,
        labels: Vec<Option<String>>,
        preprocess: PreprocessSpec,
    ) -> Result<Self> {
        if let Some(bad) = images.iter().find(|i| i.height != height || i.width != width) {
            return Err(Error::dim(format!(
                "{}x{} image in a {height}x{width} dataset",
                bad.height, bad.width
            )));
        }
        if labels.len() != images.len() {
            return Err(Error::dim(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(Self {
            height,
            width,
            images,
            labels,
            preprocess,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    /// All images in model space, one row each.
    pub fn model_rows(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(ImageGrid::to_model_space).collect()
    }

    /// Fraction of pixels above zero in pixel space.
    pub fn nonzero_pixel_ratio(&self) -> f64 {
        let total = self.len() * self.dim();
        if total == 0 {
            return 0.0;
        }
        let nz = self
            .images
            .iter()
            .flat_map(|i| i.pixels.iter())
            .filter(|p| **p > 0.0)
            .count();
        nz as f64 / total as f64
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// Crops each raw image around its brightest pixel and applies the shared
/// bias/rescale fitted over all crops.
pub fn prepare_dataset(
    raw: &[ImageGrid],
    labels: Vec<Option<String>>,
    crop_h: usize,
    crop_w: usize,
    bias: f64,
) -> Result<Dataset> {
    let crops = raw
        .iter()
        .map(|img| brightest_crop(img, crop_h, crop_w))
        .collect::<Result<Vec<_>>>()?;
    let spec = PreprocessSpec::fit(&crops, bias)?;
    let images = crops.iter().map(|c| preprocess(c, &spec)).collect();
    Dataset::new(crop_h, crop_w, images, labels, spec)
}

/// Generates, crops, and preprocesses a synthetic dataset in one go.
pub fn synthetic_dataset(spec: &SynthSpec, crop_h: usize, crop_w: usize, bias: f64) -> Result<Dataset> {
    let events = synth_generate(spec)?;
    let labels = events.iter().map(|e| Some(e.label.to_string())).collect();
    let raw: Vec<ImageGrid> = events.into_iter().map(|e| e.image).collect();
    prepare_dataset(&raw, labels, crop_h, crop_w, bias)
}
