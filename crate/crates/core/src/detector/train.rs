//! Self-supervised training: each batch image is paired with a randomly
//! warped, photometrically corrupted copy of itself, the detection head
//! is supervised by (warped) pseudo-labels on both views, and the
//! descriptor heads of the two views are tied by the known warp.

use super::labels::LabelMap;
use super::layers::{space_to_depth, ConvLayer};
use super::loss::{descriptor_loss_cells, descriptor_weight, detector_loss};
use super::tensor::{Kernel4, Tensor3};
use super::{
    activate_cells, depth_to_space, normalized_input, ConfidenceHeatmap, DetectorError,
    NetworkWeights, CELL,
};
use crate::image::{photometric_augment, AugmentationConfig, RadiometricImage};
use crate::sim::{generate_homography_pairs, HomographyMagnitudes};
use nalgebra::Vector2;

/// Loss values of one batch evaluation. `total` is the scalar the
/// gradients differentiate: per image, detection loss on the original
/// plus detection loss on the warped copy plus the weighted descriptor
/// loss, averaged over the batch. The reported `detector` value is the
/// per-view mean and `descriptor` is unweighted, so both read on their
/// natural scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub detector: f64,
    pub descriptor: f64,
    pub total: f64,
}

/// Per-layer loss gradients, indexed like [`NetworkWeights::layers`].
#[derive(Debug, Clone)]
pub struct BatchGradients {
    kernels: Vec<Kernel4>,
    biases: Vec<Vec<f64>>,
}

impl BatchGradients {
    fn zeros_like(weights: &NetworkWeights) -> Self {
        let kernels = weights
            .layers()
            .iter()
            .map(|layer| {
                let (o, i, h, w) = layer.kernel.dims();
                Kernel4::zeros(o, i, h, w)
            })
            .collect();
        let biases = weights.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect();
        Self { kernels, biases }
    }

    pub fn kernel(&self, layer: usize) -> &Kernel4 {
        &self.kernels[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    fn scale(&mut self, factor: f64) {
        for kernel in &mut self.kernels {
            for v in kernel.as_mut_slice() {
                *v *= factor;
            }
        }
        for bias in &mut self.biases {
            for v in bias.iter_mut() {
                *v *= factor;
            }
        }
    }
}

struct LayerCache {
    input: Tensor3,
    pre: Tensor3,
}

fn run_cached(layers: &[ConvLayer], input: &Tensor3) -> (Vec<LayerCache>, Tensor3) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        let (pre, post) = layer.forward(&current);
        caches.push(LayerCache { input: std::mem::replace(&mut current, post), pre });
    }
    (caches, current)
}

fn backprop_layers(
    layers: &[ConvLayer],
    caches: &[LayerCache],
    grad_output: Tensor3,
    grads: &mut BatchGradients,
    offset: usize,
) -> Tensor3 {
    let mut grad = grad_output;
    for index in (0..layers.len()).rev() {
        grad = layers[index].backward(
            &caches[index].input,
            &caches[index].pre,
            &grad,
            &mut grads.kernels[offset + index],
            &mut grads.biases[offset + index],
        );
    }
    grad
}

fn add_scaled(accumulator: &mut Tensor3, other: &Tensor3, factor: f64) {
    for (a, b) in accumulator.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += factor * b;
    }
}

/// Labels for the warped view: each labeled pixel mapped through the
/// homography, rounded to the nearest pixel, dropped when it leaves the
/// image (or maps to infinity).
fn warp_labels(labels: &LabelMap, map: &crate::geometry::Homography) -> LabelMap {
    let (w, h) = (labels.width(), labels.height());
    let points: Vec<(usize, usize)> = labels
        .points()
        .filter_map(|(x, y)| map.apply(Vector2::new(x as f64, y as f64)))
        .filter_map(|q| {
            let (qx, qy) = (q.x.round(), q.y.round());
            (qx >= 0.0 && qy >= 0.0 && qx < w as f64 && qy < h as f64)
                .then(|| (qx as usize, qy as usize))
        })
        .collect();
    LabelMap::from_points(w, h, &points).expect("warped points were bounds-checked")
}

struct ViewForward {
    encoder: Vec<LayerCache>,
    detection: Vec<LayerCache>,
    descriptor: Vec<LayerCache>,
    logits: Tensor3,
    descriptor_raw: Tensor3,
}

fn forward_view(weights: &NetworkWeights, image: &RadiometricImage) -> ViewForward {
    let input = normalized_input(image);
    let (encoder, features) = run_cached(weights.encoder(), &input);
    let (detection, logits) = run_cached(weights.detection_head(), &features);
    let (descriptor, descriptor_raw) = run_cached(weights.descriptor_head(), &features);
    ViewForward { encoder, detection, descriptor, logits, descriptor_raw }
}

/// Detection loss of one view plus the pixel-grid logit gradient folded
/// back to cell layout.
fn view_detector_loss(
    logits: &Tensor3,
    labels: &LabelMap,
) -> Result<(f64, Tensor3), DetectorError> {
    let activated = activate_cells(logits, false);
    let pixels = depth_to_space(&activated, CELL)?;
    let heatmap = ConfidenceHeatmap::new(
        pixels.width(),
        pixels.height(),
        pixels.as_slice().to_vec(),
    )?;
    let loss = detector_loss(&heatmap, labels)?;
    let grad_pixels = Tensor3::from_data(1, pixels.height(), pixels.width(), loss.logit_gradient);
    Ok((loss.value, space_to_depth(&grad_pixels, CELL)))
}

/// Evaluates losses and loss gradients on a batch without touching the
/// weights. Deterministic in `seed`: warps are drawn per image index,
/// photometric corruption per view.
pub fn evaluate_batch(
    weights: &NetworkWeights,
    batch: &[(RadiometricImage, LabelMap)],
    magnitudes: &HomographyMagnitudes,
    augmentation: &AugmentationConfig,
    seed: u64,
) -> Result<(TrainStats, BatchGradients), DetectorError> {
    if batch.is_empty() {
        return Err(DetectorError::EmptyBatch);
    }
    for (image, labels) in batch {
        if image.width() % CELL != 0 || image.height() % CELL != 0 {
            return Err(DetectorError::DimsNotDivisible {
                width: image.width(),
                height: image.height(),
            });
        }
        if image.width() != labels.width() || image.height() != labels.height() {
            return Err(DetectorError::DimensionMismatch {
                left_width: image.width(),
                left_height: image.height(),
                right_width: labels.width(),
                right_height: labels.height(),
            });
        }
    }

    let corpus: Vec<RadiometricImage> = batch.iter().map(|(image, _)| image.clone()).collect();
    let pairs = generate_homography_pairs(&corpus, magnitudes, seed, None)?;

    let encoder_len = weights.encoder().len();
    let mut grads = BatchGradients::zeros_like(weights);
    let mut stats = TrainStats { detector: 0.0, descriptor: 0.0, total: 0.0 };
    for (index, ((_, labels), pair)) in batch.iter().zip(&pairs).enumerate() {
        let view_seed = seed.wrapping_add(1 + 2 * index as u64);
        let original = photometric_augment(&pair.reference, augmentation, view_seed);
        let warped = photometric_augment(&pair.warped, augmentation, view_seed.wrapping_add(1));
        let warped_labels = warp_labels(labels, &pair.map);

        let fwd_o = forward_view(weights, &original);
        let fwd_w = forward_view(weights, &warped);
        if fwd_o.logits.as_slice().iter().any(|v| !v.is_finite())
            || fwd_w.logits.as_slice().iter().any(|v| !v.is_finite())
            || fwd_o.descriptor_raw.as_slice().iter().any(|v| !v.is_finite())
            || fwd_w.descriptor_raw.as_slice().iter().any(|v| !v.is_finite())
        {
            return Err(DetectorError::Diverged { detector: f64::NAN, descriptor: f64::NAN });
        }

        let (det_o, grad_logits_o) = view_detector_loss(&fwd_o.logits, labels)?;
        let (det_w, grad_logits_w) = view_detector_loss(&fwd_w.logits, &warped_labels)?;
        let (desc, grad_desc_o, grad_desc_w) =
            descriptor_loss_cells(&fwd_o.descriptor_raw, &fwd_w.descriptor_raw, &pair.map)?;
        let weight = descriptor_weight(original.height(), original.width());
        let total = det_o + det_w + weight * desc;
        if !total.is_finite() {
            return Err(DetectorError::Diverged { detector: det_o + det_w, descriptor: desc });
        }
        stats.detector += 0.5 * (det_o + det_w);
        stats.descriptor += desc;
        stats.total += total;

        for (view, grad_logits, grad_desc) in [
            (&fwd_o, grad_logits_o, &grad_desc_o),
            (&fwd_w, grad_logits_w, &grad_desc_w),
        ] {
            let grad_feat_det = backprop_layers(
                weights.detection_head(),
                &view.detection,
                grad_logits,
                &mut grads,
                encoder_len,
            );
            let mut weighted = grad_desc.clone();
            for v in weighted.as_mut_slice() {
                *v *= weight;
            }
            let grad_feat_desc = backprop_layers(
                weights.descriptor_head(),
                &view.descriptor,
                weighted,
                &mut grads,
                encoder_len + 2,
            );
            let mut grad_features = grad_feat_det;
            add_scaled(&mut grad_features, &grad_feat_desc, 1.0);
            backprop_layers(weights.encoder(), &view.encoder, grad_features, &mut grads, 0);
        }
    }

    let inverse = 1.0 / batch.len() as f64;
    grads.scale(inverse);
    stats.detector *= inverse;
    stats.descriptor *= inverse;
    stats.total *= inverse;
    Ok((stats, grads))
}

/// One full-batch gradient step. Weights are only modified when every
/// loss is finite; a zero learning rate evaluates without writing, so
/// the weights stay bit-identical.
pub fn train_step(
    weights: &mut NetworkWeights,
    batch: &[(RadiometricImage, LabelMap)],
    magnitudes: &HomographyMagnitudes,
    augmentation: &AugmentationConfig,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainStats, DetectorError> {
    let (stats, grads) = evaluate_batch(weights, batch, magnitudes, augmentation, seed)?;
    if learning_rate != 0.0 {
        for (index, layer) in weights.layers_mut().iter_mut().enumerate() {
            for (w, g) in layer
                .kernel
                .as_mut_slice()
                .iter_mut()
                .zip(grads.kernels[index].as_slice())
            {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.biases[index]) {
                *b -= learning_rate * g;
            }
        }
    }
    Ok(stats)
}
