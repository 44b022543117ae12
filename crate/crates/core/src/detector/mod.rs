//! Convolutional keypoint detector: a small depthwise-separable encoder
//! with detection and descriptor heads, decoded at cell resolution 1/8 and
//! shuffled back to full resolution. Inference, losses, pseudo-label
//! generation, training with hand-written backpropagation, and a binary
//! weights format all live here.

mod io;
mod labels;
mod layers;
mod loss;
mod tensor;
mod train;

pub use io::{load_weights, save_weights};
pub use labels::{generate_pseudo_labels, handcrafted_keypoints, LabelMap};
pub use layers::{depth_to_space, space_to_depth, Activation, ConvLayer, LayerKind};
pub use loss::{
    descriptor_loss, descriptor_loss_cells, descriptor_weight, detector_loss, DetectorLoss,
    MARGIN_NEGATIVE, MARGIN_POSITIVE,
};
pub use tensor::{Kernel4, Tensor3};
pub use train::{evaluate_batch, train_step, BatchGradients, TrainStats};

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::{RadiometricImage, MAX_COUNT};

/// Cell-resolution activation map (channels x H/8 x W/8 for the heads).
pub type FeatureMap = Tensor3;

/// Spatial shrink factor between the input image and the head outputs.
pub const CELL: usize = 8;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {width}x{height} is not divisible by {CELL}")]
    DimsNotDivisible { width: usize, height: usize },
    #[error("layer {layer}: {reason}")]
    ShapeMismatch { layer: usize, reason: String },
    #[error("network needs at least 5 layers (encoder plus two 2-layer heads), got {got}")]
    TooFewLayers { got: usize },
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
    #[error("label point ({x}, {y}) lies outside a {width}x{height} image")]
    PointOutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("training diverged: detector loss {detector}, descriptor loss {descriptor}")]
    Diverged { detector: f64, descriptor: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("bad magic {got:?}, expected \"TPNW\"")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported weights version {got}")]
    UnsupportedVersion { got: u32 },
    #[error("layer {layer}: file truncated, needed {needed} more bytes, {got} left")]
    Truncated { layer: usize, needed: usize, got: usize },
    #[error("layer {layer}: invalid {field} tag {got}")]
    BadTag { layer: usize, field: &'static str, got: u8 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

/// The full network: an encoder followed by a 2-layer detection head and a
/// 2-layer descriptor head (the last four layers, in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    layers: Vec<ConvLayer>,
}

const HEAD_LAYERS: usize = 4;

impl NetworkWeights {
    /// Validates layer chaining: 1 input channel, encoder stride product
    /// exactly 8, stride-1 heads, and 64 output channels from both heads.
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self, DetectorError> {
        if layers.len() < HEAD_LAYERS + 1 {
            return Err(DetectorError::TooFewLayers { got: layers.len() });
        }
        let split = layers.len() - HEAD_LAYERS;
        let mut channels = 1;
        let mut downsample = 1;
        for (index, layer) in layers[..split].iter().enumerate() {
            channels = layer.check_chain(index, channels)?;
            downsample *= layer.stride;
        }
        if downsample != CELL {
            return Err(DetectorError::ShapeMismatch {
                layer: split.saturating_sub(1),
                reason: format!("encoder downsamples {downsample}x, expected {CELL}x"),
            });
        }
        for head in 0..2 {
            let mut c = channels;
            for offset in 0..2 {
                let index = split + 2 * head + offset;
                let layer = &layers[index];
                c = layer.check_chain(index, c)?;
                if layer.stride != 1 {
                    return Err(DetectorError::ShapeMismatch {
                        layer: index,
                        reason: "head layers must have stride 1".into(),
                    });
                }
            }
            if c != CELL * CELL {
                return Err(DetectorError::ShapeMismatch {
                    layer: split + 2 * head + 1,
                    reason: format!("head must end with {} channels, got {c}", CELL * CELL),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub(crate) fn encoder(&self) -> &[ConvLayer] {
        &self.layers[..self.layers.len() - HEAD_LAYERS]
    }

    pub(crate) fn detection_head(&self) -> &[ConvLayer] {
        let n = self.layers.len();
        &self.layers[n - 4..n - 2]
    }

    pub(crate) fn descriptor_head(&self) -> &[ConvLayer] {
        let n = self.layers.len();
        &self.layers[n - 2..]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    /// The full-size recipe: a 3x3 stem into five depthwise-separable
    /// blocks (strides 2-1-2-1-2) ending at 128 channels, with 3x3+1x1
    /// heads. Randomly initialized, deterministic per seed.
    pub fn mobile_default(seed: u64) -> Self {
        let mut b = NetBuilder::new(seed);
        b.standard(1, 16, 3, 1);
        b.separable(16, 32, 2);
        b.separable(32, 32, 1);
        b.separable(32, 64, 2);
        b.separable(64, 64, 1);
        b.separable(64, 128, 2);
        b.head(128);
        Self::new(b.layers).expect("default recipe is consistent")
    }

    /// A small three-block encoder (8-16-32 channels) with the same head
    /// structure, light enough to train inside tests.
    pub fn compact(seed: u64) -> Self {
        let mut b = NetBuilder::new(seed);
        b.standard(1, 8, 3, 2);
        b.separable(8, 16, 2);
        b.separable(16, 32, 2);
        b.head(32);
        Self::new(b.layers).expect("compact recipe is consistent")
    }

    /// The smallest legal network: one stride-8 stem plus the two heads.
    /// Only useful for exercising machinery (gradients, file round trips).
    pub fn tiny(seed: u64, stem_channels: usize) -> Self {
        let mut b = NetBuilder::new(seed);
        b.standard(1, stem_channels, 3, 8);
        b.head(stem_channels);
        Self::new(b.layers).expect("tiny recipe is consistent")
    }
}

/// Randomly initialized layer factory: He-normal kernels, uniform biases
/// in `+-1/sqrt(fan_in)` (nonzero biases keep descriptor cells away from
/// the degenerate zero vector, whose direction is undefined). Values are
/// rounded through f32 so that a freshly built network survives the
/// 32-bit weights file bit-exactly.
struct NetBuilder {
    rng: ChaCha8Rng,
    layers: Vec<ConvLayer>,
}

impl NetBuilder {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), layers: Vec::new() }
    }

    fn init_kernel(&mut self, out_c: usize, in_c: usize, k: usize, fan_in: usize) -> Kernel4 {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..out_c * in_c * k * k)
            .map(|_| normal.sample(&mut self.rng) as f32 as f64)
            .collect();
        Kernel4::from_data(out_c, in_c, k, k, data)
    }

    fn init_bias(&mut self, out_c: usize, fan_in: usize) -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..out_c).map(|_| self.rng.gen_range(-bound..bound) as f32 as f64).collect()
    }

    fn standard(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize) {
        let fan_in = in_c * k * k;
        let kernel = self.init_kernel(out_c, in_c, k, fan_in);
        let bias = self.init_bias(out_c, fan_in);
        self.layers.push(ConvLayer {
            kind: LayerKind::Standard,
            kernel,
            bias,
            stride,
            activation: Activation::Relu,
        });
    }

    fn separable(&mut self, in_c: usize, out_c: usize, stride: usize) {
        let depthwise = self.init_kernel(in_c, 1, 3, 9);
        let depthwise_bias = self.init_bias(in_c, 9);
        self.layers.push(ConvLayer {
            kind: LayerKind::Depthwise,
            kernel: depthwise,
            bias: depthwise_bias,
            stride,
            activation: Activation::Relu,
        });
        let pointwise = self.init_kernel(out_c, in_c, 1, in_c);
        let pointwise_bias = self.init_bias(out_c, in_c);
        self.layers.push(ConvLayer {
            kind: LayerKind::Pointwise,
            kernel: pointwise,
            bias: pointwise_bias,
            stride: 1,
            activation: Activation::Relu,
        });
    }

    /// Detection head then descriptor head: 3x3 (relu) + 1x1 (linear).
    fn head(&mut self, in_c: usize) {
        for _ in 0..2 {
            let spatial = self.init_kernel(in_c, in_c, 3, in_c * 9);
            let spatial_bias = self.init_bias(in_c, in_c * 9);
            self.layers.push(ConvLayer {
                kind: LayerKind::Standard,
                kernel: spatial,
                bias: spatial_bias,
                stride: 1,
                activation: Activation::Relu,
            });
            let project = self.init_kernel(CELL * CELL, in_c, 1, in_c);
            let project_bias = self.init_bias(CELL * CELL, in_c);
            self.layers.push(ConvLayer {
                kind: LayerKind::Pointwise,
                kernel: project,
                bias: project_bias,
                stride: 1,
                activation: Activation::Linear,
            });
        }
    }
}

/// Per-pixel keypoint confidence in [0, 1], same size as the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceHeatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ConfidenceHeatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, DetectorError> {
        if data.len() != width * height {
            return Err(DetectorError::DimensionMismatch {
                left_width: width,
                left_height: height,
                right_width: data.len(),
                right_height: 1,
            });
        }
        assert!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "heatmap values must lie in [0, 1]"
        );
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Detected feature point: integer pixel position at detection time
/// (sub-pixel refinement happens in the tracker), confidence in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: Vector2<f64>,
    pub score: f64,
}

/// Dense per-pixel unit descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMap {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector_at(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.dim;
        &self.data[base..base + self.dim]
    }
}

/// Divides a vector by its L2 norm with a tiny floor so exactly-zero
/// vectors stay finite (they normalize to zero and carry zero gradient).
pub(crate) fn normalize_vector(v: &mut [f64]) -> f64 {
    let norm = (v.iter().map(|x| x * x).sum::<f64>() + 1e-24).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub include_descriptors: bool,
    /// Decode cell activations with a channel-wise softmax instead of the
    /// element-wise sigmoid used in training.
    pub softmax_decode: bool,
}

pub(crate) fn normalized_input(image: &RadiometricImage) -> Tensor3 {
    Tensor3::from_data(
        1,
        image.height(),
        image.width(),
        image.as_slice().iter().map(|&v| v / MAX_COUNT).collect(),
    )
}

pub(crate) fn run_layers(layers: &[ConvLayer], input: &Tensor3) -> Tensor3 {
    let mut current = input.clone();
    for layer in layers {
        let (_, out) = layer.forward(&current);
        current = out;
    }
    current
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn activate_cells(logits: &Tensor3, softmax: bool) -> Tensor3 {
    if !softmax {
        return logits.map(sigmoid);
    }
    let mut out = Tensor3::zeros(logits.channels(), logits.height(), logits.width());
    for cy in 0..logits.height() {
        for cx in 0..logits.width() {
            let max = (0..logits.channels())
                .map(|c| logits.get(c, cy, cx))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..logits.channels() {
                denom += (logits.get(c, cy, cx) - max).exp();
            }
            for c in 0..logits.channels() {
                out.set(c, cy, cx, (logits.get(c, cy, cx) - max).exp() / denom);
            }
        }
    }
    out
}

/// Bilinear upsampling of cell vectors to pixel resolution, anchored at
/// cell centers (pixel `8 i + 3.5`), followed by per-pixel normalization.
fn upsample_descriptors(cells: &Tensor3) -> DescriptorMap {
    let dim = cells.channels();
    let height = cells.height() * CELL;
    let width = cells.width() * CELL;
    let mut data = vec![0.0; width * height * dim];
    let half = (CELL as f64 - 1.0) / 2.0;
    for y in 0..height {
        let cy = ((y as f64 - half) / CELL as f64).clamp(0.0, (cells.height() - 1) as f64);
        let y0 = cy.floor() as usize;
        let y1 = (y0 + 1).min(cells.height() - 1);
        let fy = cy - y0 as f64;
        for x in 0..width {
            let cx = ((x as f64 - half) / CELL as f64).clamp(0.0, (cells.width() - 1) as f64);
            let x0 = cx.floor() as usize;
            let x1 = (x0 + 1).min(cells.width() - 1);
            let fx = cx - x0 as f64;
            let base = (y * width + x) * dim;
            for c in 0..dim {
                let top = cells.get(c, y0, x0) * (1.0 - fx) + cells.get(c, y0, x1) * fx;
                let bot = cells.get(c, y1, x0) * (1.0 - fx) + cells.get(c, y1, x1) * fx;
                data[base + c] = top * (1.0 - fy) + bot * fy;
            }
            normalize_vector(&mut data[base..base + dim]);
        }
    }
    DescriptorMap { width, height, dim, data }
}

/// Full inference: encoder, detection head, per-cell activation, and the
/// depth-to-space shuffle back to pixel resolution. Descriptors are
/// computed only when requested.
pub fn forward(
    weights: &NetworkWeights,
    image: &RadiometricImage,
    options: ForwardOptions,
) -> Result<(ConfidenceHeatmap, Option<DescriptorMap>), DetectorError> {
    if image.width() % CELL != 0 || image.height() % CELL != 0 {
        return Err(DetectorError::DimsNotDivisible {
            width: image.width(),
            height: image.height(),
        });
    }
    let input = normalized_input(image);
    let features = run_layers(weights.encoder(), &input);
    let logits = run_layers(weights.detection_head(), &features);
    let activated = activate_cells(&logits, options.softmax_decode);
    let pixels = depth_to_space(&activated, CELL)?;
    let heatmap = ConfidenceHeatmap {
        width: pixels.width(),
        height: pixels.height(),
        data: pixels.as_slice().to_vec(),
    };
    let descriptors = if options.include_descriptors {
        let raw = run_layers(weights.descriptor_head(), &features);
        Some(upsample_descriptors(&raw))
    } else {
        None
    };
    Ok((heatmap, descriptors))
}

/// Greedy non-maximum suppression: candidates at or above `threshold`,
/// visited in descending score order (ties broken by row then column),
/// accepted while no already-accepted point lies within `nms_radius` in
/// Chebyshev distance, up to `max_points`.
pub fn decode_keypoints(
    heatmap: &ConfidenceHeatmap,
    threshold: f64,
    nms_radius: usize,
    max_points: usize,
) -> Vec<Keypoint> {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must be in (0, 1)");
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..heatmap.height() {
        for x in 0..heatmap.width() {
            let score = heatmap.value(x, y);
            if score >= threshold {
                candidates.push((score, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let radius = nms_radius as isize;
    let mut accepted: Vec<(isize, isize)> = Vec::new();
    let mut keypoints = Vec::new();
    for (score, y, x) in candidates {
        if keypoints.len() >= max_points {
            break;
        }
        let (xi, yi) = (x as isize, y as isize);
        let suppressed = accepted
            .iter()
            .any(|&(ax, ay)| (ax - xi).abs().max((ay - yi).abs()) <= radius);
        if suppressed {
            continue;
        }
        accepted.push((xi, yi));
        keypoints.push(Keypoint { position: Vector2::new(x as f64, y as f64), score });
    }
    keypoints
}
