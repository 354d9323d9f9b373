//! Flat row-major tensor types shared by the whole pipeline.
//!
//! All numeric data is `f64`; images use channel-major `(3, H, W)` layout,
//! feature maps `(C, h, w)`, masks and similarity grids `(H, W)`. Types are
//! immutable values after construction and safe to share across threads.

use crate::error::{dim_err, param_err, Error, Result};

/// Inclusive axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(param_err!("{what} contains a non-finite value"));
    }
    Ok(())
}

/// RGB image, shape `(3, H, W)`, values nominally in [0, 1].
///
/// Full-size images (episodes, files) are at least 16×16; interior crops
/// produced by the style pipeline may be smaller. Intermediate results of
/// the random convolution may leave [0, 1]; every public augmentation output
/// is clamped back.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(param_err!("image dimensions must be positive"));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(dim_err!(
                "image payload is {} values, expected {}",
                data.len(),
                Self::CHANNELS * height * width
            ));
        }
        ensure_finite(&data, "image")?;
        Ok(ImageTensor { data, height, width })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageTensor { data: vec![value; Self::CHANNELS * height * width], height, width }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Episode-grade images must be at least 16×16 (9×9 smoothing support
    /// and stride-16 features).
    pub fn validate_full_size(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(param_err!(
                "full image must be at least 16x16, got {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    pub fn crop(&self, rect: Rect) -> Result<ImageTensor> {
        if rect.x1 >= self.width || rect.y1 >= self.height || rect.x0 > rect.x1 || rect.y0 > rect.y1
        {
            return Err(param_err!("crop rect out of bounds"));
        }
        let (h, w) = (rect.height(), rect.width());
        let mut out = Vec::with_capacity(Self::CHANNELS * h * w);
        for c in 0..Self::CHANNELS {
            for y in rect.y0..=rect.y1 {
                for x in rect.x0..=rect.x1 {
                    out.push(self.get(c, y, x));
                }
            }
        }
        Ok(ImageTensor { data: out, height: h, width: w })
    }

    pub fn clamped_unit(mut self) -> ImageTensor {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), Self::CHANNELS * height * width);
        ImageTensor { data, height, width }
    }
}

/// Real-valued mask, shape `(H, W)`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(param_err!("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(dim_err!(
                "mask payload is {} values, expected {}",
                data.len(),
                height * width
            ));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(param_err!("mask values must lie in [0, 1]"));
        }
        Ok(SoftMask { data, height, width })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        SoftMask { data: vec![value; height * width], height, width }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Count of cells strictly above 0.5 — the binary foreground area.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        SoftMask { data, height, width }
    }
}

/// Unconstrained real 2-D field: similarity maps, confidence maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!(
                "grid payload is {} values, expected {}",
                data.len(),
                height * width
            ));
        }
        ensure_finite(&data, "grid")?;
        Ok(Grid { data, height, width })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid { data: vec![value; height * width], height, width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Integer superpixel label field, shape `(H, W)`.
///
/// Labels partition the pixels: each pixel carries exactly one label in
/// `[0, region_count)`. Some labels may be absent (regions can vanish when
/// the field is downsampled).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    labels: Vec<u32>,
    height: usize,
    width: usize,
    region_count: u32,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, region_count: u32) -> Result<Self> {
        if labels.len() != height * width {
            return Err(dim_err!(
                "label payload is {} values, expected {}",
                labels.len(),
                height * width
            ));
        }
        if region_count == 0 {
            return Err(param_err!("region count must be positive"));
        }
        if labels.iter().any(|&l| l >= region_count) {
            return Err(param_err!("label out of range [0, {region_count})"));
        }
        Ok(LabelMask { labels, height, width, region_count })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region_count(&self) -> u32 {
        self.region_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Distinct labels actually present, ascending.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut seen = vec![false; self.region_count as usize];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.region_count).filter(|&l| seen[l as usize]).collect()
    }

    /// Tightest rectangle containing every pixel of `label`.
    pub fn region_bounding_box(&self, label: u32) -> Result<Rect> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == label {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if !any {
            return Err(Error::Degenerate(format!("superpixel region {label} is empty")));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }
}

/// Feature tensor, shape `(C, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(dim_err!(
                "feature payload is {} values, expected {}",
                data.len(),
                channels * height * width
            ));
        }
        ensure_finite(&data, "feature map")?;
        Ok(FeatureMap { data, channels, height, width })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { data: vec![0.0; channels * height * width], channels, height, width }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// The C-vector at spatial position (y, x).
    pub fn column(&self, y: usize, x: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        let base = y * self.width + x;
        (0..self.channels).map(|c| self.data[c * plane + base]).collect()
    }

    pub(crate) fn from_raw_unchecked(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        FeatureMap { data, channels, height, width }
    }
}

/// One few-shot task: K annotated support images plus a query.
#[derive(Clone, Debug)]
pub struct Episode {
    pub supports: Vec<(ImageTensor, SoftMask)>,
    pub query_image: ImageTensor,
    /// Ground truth; read only by loss computation and evaluation.
    pub query_mask: SoftMask,
    pub seed: u64,
}

impl Episode {
    pub fn new(
        supports: Vec<(ImageTensor, SoftMask)>,
        query_image: ImageTensor,
        query_mask: SoftMask,
        seed: u64,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(param_err!("episode needs at least one support shot"));
        }
        let (h, w) = (query_image.height(), query_image.width());
        query_image.validate_full_size()?;
        if query_mask.height() != h || query_mask.width() != w {
            return Err(dim_err!("query mask does not match query image"));
        }
        for (img, mask) in &supports {
            if img.height() != h || img.width() != w {
                return Err(dim_err!("support image size differs from query"));
            }
            if mask.height() != h || mask.width() != w {
                return Err(dim_err!("support mask does not match its image"));
            }
        }
        Ok(Episode { supports, query_image, query_mask, seed })
    }

    pub fn k_shot(&self) -> usize {
        self.supports.len()
    }

    pub fn height(&self) -> usize {
        self.query_image.height()
    }

    pub fn width(&self) -> usize {
        self.query_image.width()
    }
}
