//! Radiometric image container, fixed-pattern-noise model, pyramids, and
//! sub-pixel sampling.
//!
//! Pixel values are 16-bit radiometric counts stored as `f64` so that
//! alignment and augmentation never quantize; quantization back to 16 bits
//! happens only at file I/O. Pixel coordinates put integer positions at pixel
//! centers: `(x, y)` with `x` along the row (column index) and `y` down the
//! columns (row index).

mod augment;
mod io;

pub use augment::{
    photometric_augment, photometric_augment_with_bank, AugmentError, AugmentationConfig,
};
pub use io::{
    load_fpn_bank, read_frames_csv, read_image, read_pgm16, read_tiff16, write_frames_csv,
    write_image, write_pgm16, write_tiff16, FrameEntry, ImageIoError, SequenceReader,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Homography;

/// Largest representable radiometric count (16-bit sensor range).
pub const MAX_COUNT: f64 = 65535.0;

/// Errors for in-memory image construction and manipulation.
#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("data length {got} does not match {width}x{height}")]
    DataLength { width: usize, height: usize, got: usize },
    #[error("value {value} at index {index} outside [0, 65535] or not finite")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
    #[error("pattern mean {mean} exceeds the ±1 count zero-mean bound")]
    PatternNotZeroMean { mean: f64 },
    #[error("{levels} pyramid levels reduce a {width}x{height} image below {min_dim} px")]
    TooManyLevels { levels: usize, width: usize, height: usize, min_dim: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
}

/// A single thermal frame: radiometric counts plus a capture timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiometricImage {
    width: usize,
    height: usize,
    timestamp: f64,
    data: Vec<f64>,
}

impl RadiometricImage {
    /// Validates dimensions, length, and the [0, 65535] value range.
    pub fn new(
        width: usize,
        height: usize,
        timestamp: f64,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        if data.len() != width * height {
            return Err(ImageError::DataLength { width, height, got: data.len() });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || !(0.0..=MAX_COUNT).contains(&value) {
                return Err(ImageError::ValueOutOfRange { index, value });
            }
        }
        Ok(Self { width, height, timestamp, data })
    }

    /// Builds from a per-pixel function; values are clamped into range.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, MAX_COUNT));
            }
        }
        Self::new(width, height, timestamp, data)
    }

    pub fn constant(
        width: usize,
        height: usize,
        timestamp: f64,
        value: f64,
    ) -> Result<Self, ImageError> {
        Self::new(width, height, timestamp, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// Pixel value at integer coordinates (x = column, y = row).
    pub fn value(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear interpolation of the four neighbors of `(x, y)`.
    ///
    /// The valid domain is `[0, width-1] x [0, height-1]`; outside it the
    /// sample is `None` so callers can cull patches that left the image.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = if x0 + 1 < self.width { x0 + 1 } else { x0 };
        let y1 = if y0 + 1 < self.height { y0 + 1 } else { y0 };
        let top = self.value(x0, y0) * (1.0 - fx) + self.value(x1, y0) * fx;
        let bottom = self.value(x0, y1) * (1.0 - fx) + self.value(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Resamples through the inverse of `map`; target pixels with no
    /// preimage inside the source get `fill`.
    pub fn warp(&self, map: &Homography, fill: f64) -> RadiometricImage {
        let inv = map.inverse();
        let fill = fill.clamp(0.0, MAX_COUNT);
        let mut data = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let value = inv
                    .apply(nalgebra::Vector2::new(x as f64, y as f64))
                    .and_then(|src| self.bilinear_sample(src.x, src.y))
                    .unwrap_or(fill);
                data.push(value);
            }
        }
        RadiometricImage {
            width: self.width,
            height: self.height,
            timestamp: self.timestamp,
            data,
        }
    }
}

/// Additive fixed-pattern-noise offsets, zero-mean by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnPattern {
    width: usize,
    height: usize,
    offsets: Vec<f64>,
}

impl FpnPattern {
    /// Validates dimensions and the ±1 count zero-mean invariant.
    pub fn new(width: usize, height: usize, offsets: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        if offsets.len() != width * height {
            return Err(ImageError::DataLength { width, height, got: offsets.len() });
        }
        let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
        if !mean.is_finite() || mean.abs() > 1.0 {
            return Err(ImageError::PatternNotZeroMean { mean });
        }
        Ok(Self { width, height, offsets })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn offset(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.offsets[y * self.width + x]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

/// Adds a fixed-pattern to an image, clamping into the sensor range.
pub fn apply_fpn(
    image: &RadiometricImage,
    pattern: &FpnPattern,
) -> Result<RadiometricImage, ImageError> {
    if image.width != pattern.width || image.height != pattern.height {
        return Err(ImageError::DimensionMismatch {
            left_width: image.width,
            left_height: image.height,
            right_width: pattern.width,
            right_height: pattern.height,
        });
    }
    let data = image
        .data
        .iter()
        .zip(&pattern.offsets)
        .map(|(&v, &o)| (v + o).clamp(0.0, MAX_COUNT))
        .collect();
    Ok(RadiometricImage {
        width: image.width,
        height: image.height,
        timestamp: image.timestamp,
        data,
    })
}

/// Column fixed-pattern noise: one constant offset per column, de-meaned so
/// the pattern adds no net signal. Looks like vertical stripes.
pub fn synthesize_column_fpn(
    width: usize,
    height: usize,
    amplitude: f64,
    seed: u64,
) -> FpnPattern {
    assert!(amplitude >= 0.0, "amplitude must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<f64> = (0..width)
        .map(|_| {
            if amplitude == 0.0 {
                0.0
            } else {
                rng.gen_range(-amplitude..=amplitude)
            }
        })
        .collect();
    let mean = columns.iter().sum::<f64>() / width as f64;
    for c in &mut columns {
        *c -= mean;
    }
    let mut offsets = Vec::with_capacity(width * height);
    for _y in 0..height {
        offsets.extend_from_slice(&columns);
    }
    FpnPattern { width, height, offsets }
}

/// Smooth low-frequency 2-D offset field: a de-meaned sum of a few cosine
/// waves at 0.5 to 2 cycles per image, peak-normalized to `amplitude`.
pub fn synthesize_smooth_fpn(
    width: usize,
    height: usize,
    amplitude: f64,
    seed: u64,
) -> FpnPattern {
    assert!(amplitude >= 0.0, "amplitude must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-2.0..=2.0),
                rng.gen_range(-2.0..=2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..=1.0),
            )
        })
        .collect();
    let mut offsets = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            let s: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos())
                .sum();
            offsets.push(s);
        }
    }
    let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
    let mut peak: f64 = 0.0;
    for o in &mut offsets {
        *o -= mean;
        peak = peak.max(o.abs());
    }
    if peak > 0.0 && amplitude > 0.0 {
        let scale = amplitude / peak;
        for o in &mut offsets {
            *o *= scale;
        }
    } else {
        offsets.iter_mut().for_each(|o| *o = 0.0);
    }
    FpnPattern { width, height, offsets }
}

/// 8-bit rescale of a radiometric frame, for visualization and baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct EightBitImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    /// Set when the input was constant and the min-max stretch was undefined;
    /// the output is then all zeros.
    pub constant_input: bool,
}

/// Min-max stretch to 8 bits: `round(255 * (v - min) / (max - min))`.
pub fn rescale_to_8bit(image: &RadiometricImage) -> EightBitImage {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in &image.data {
        min = min.min(v);
        max = max.max(v);
    }
    if max - min <= 0.0 {
        return EightBitImage {
            width: image.width,
            height: image.height,
            data: vec![0; image.data.len()],
            constant_input: true,
        };
    }
    let range = max - min;
    let data = image.data.iter().map(|&v| (255.0 * (v - min) / range).round() as u8).collect();
    EightBitImage { width: image.width, height: image.height, data, constant_input: false }
}

/// Scale-space pyramid; level 0 is full resolution, each further level is the
/// 2x2 box-filtered, 2x downsampled predecessor.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<RadiometricImage>,
}

/// Smallest width or height a pyramid level may have.
const MIN_PYRAMID_DIM: usize = 2;

impl ImagePyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &RadiometricImage {
        &self.levels[k]
    }

    pub fn finest(&self) -> &RadiometricImage {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &RadiometricImage {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Box-filters and 2x downsamples; odd dimensions keep a partial last
/// row/column (ceil semantics) averaged over the available pixels.
fn downsample(image: &RadiometricImage) -> RadiometricImage {
    let out_w = image.width.div_ceil(2);
    let out_h = image.height.div_ceil(2);
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let x = ox * 2 + dx;
                    let y = oy * 2 + dy;
                    if x < image.width && y < image.height {
                        sum += image.value(x, y);
                        count += 1.0;
                    }
                }
            }
            data.push(sum / count);
        }
    }
    RadiometricImage { width: out_w, height: out_h, timestamp: image.timestamp, data }
}

/// Builds a `levels`-deep pyramid. Rejects level counts that would shrink the
/// coarsest level below 2 px in either dimension.
pub fn build_pyramid(image: &RadiometricImage, levels: usize) -> Result<ImagePyramid, ImageError> {
    if levels == 0 {
        return Err(ImageError::NoLevels);
    }
    let mut coarsest_w = image.width;
    let mut coarsest_h = image.height;
    for _ in 1..levels {
        coarsest_w = coarsest_w.div_ceil(2);
        coarsest_h = coarsest_h.div_ceil(2);
    }
    if coarsest_w < MIN_PYRAMID_DIM || coarsest_h < MIN_PYRAMID_DIM {
        return Err(ImageError::TooManyLevels {
            levels,
            width: image.width,
            height: image.height,
            min_dim: MIN_PYRAMID_DIM,
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(image.clone());
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(ImagePyramid { levels: out })
}
