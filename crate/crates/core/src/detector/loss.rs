//! Training losses: per-pixel binary cross-entropy for the detection head
//! and a hinge-margin contrastive loss over cell descriptors.

use nalgebra::Vector2;

use super::labels::LabelMap;
use super::tensor::Tensor3;
use super::{normalize_vector, ConfidenceHeatmap, DetectorError, CELL};
use crate::geometry::Homography;

/// Hinge target for corresponding descriptor pairs (cosine similarity).
pub const MARGIN_POSITIVE: f64 = 1.0;
/// Hinge ceiling for non-corresponding pairs.
pub const MARGIN_NEGATIVE: f64 = 0.2;
/// Mapped cell centers closer than this (pixels) count as correspondences.
pub const CORRESPONDENCE_RADIUS: f64 = 8.0;
/// Base weight of the descriptor loss relative to the detection loss.
const LAMBDA_D: f64 = 1e-4;

/// Log arguments are clamped to `[EPS, 1 - EPS]` so saturated confidences
/// stay finite.
const EPS: f64 = 1e-7;

/// Detection-loss weight for the descriptor term, scaled so the two terms
/// keep a fixed ratio regardless of resolution: the detection loss
/// averages over pixels while the descriptor loss averages over cells.
pub fn descriptor_weight(height: usize, width: usize) -> f64 {
    LAMBDA_D * (height * width) as f64 / ((height / CELL) * (width / CELL)) as f64
}

/// Mean binary cross-entropy and its gradient with respect to the
/// pre-sigmoid cell logits (laid out on the pixel grid).
#[derive(Debug, Clone)]
pub struct DetectorLoss {
    pub value: f64,
    /// d(loss)/d(logit) per pixel, row-major; equals `(C - L) / (H W)`.
    pub logit_gradient: Vec<f64>,
}

pub fn detector_loss(
    heatmap: &ConfidenceHeatmap,
    labels: &LabelMap,
) -> Result<DetectorLoss, DetectorError> {
    if heatmap.width() != labels.width() || heatmap.height() != labels.height() {
        return Err(DetectorError::DimensionMismatch {
            left_width: heatmap.width(),
            left_height: heatmap.height(),
            right_width: labels.width(),
            right_height: labels.height(),
        });
    }
    let count = (heatmap.width() * heatmap.height()) as f64;
    let mut value = 0.0;
    let mut logit_gradient = Vec::with_capacity(heatmap.as_slice().len());
    for (index, &c) in heatmap.as_slice().iter().enumerate() {
        let l = f64::from(u8::from(labels.get_index(index)));
        let clamped = c.clamp(EPS, 1.0 - EPS);
        value -= l * clamped.ln() + (1.0 - l) * (1.0 - clamped).ln();
        logit_gradient.push((c - l) / count);
    }
    Ok(DetectorLoss { value: value / count, logit_gradient })
}

/// Pixel coordinate of the center of cell `index` along one axis.
pub(crate) fn cell_center(index: usize) -> f64 {
    (index * CELL) as f64 + (CELL as f64 - 1.0) / 2.0
}

fn normalized_cells(raw: &Tensor3) -> (Vec<f64>, Vec<f64>) {
    let dim = raw.channels();
    let cells = raw.height() * raw.width();
    let mut vectors = vec![0.0; cells * dim];
    let mut norms = vec![0.0; cells];
    for cy in 0..raw.height() {
        for cx in 0..raw.width() {
            let cell = cy * raw.width() + cx;
            for c in 0..dim {
                vectors[cell * dim + c] = raw.get(c, cy, cx);
            }
            norms[cell] = normalize_vector(&mut vectors[cell * dim..(cell + 1) * dim]);
        }
    }
    (vectors, norms)
}

/// Hinge-margin loss over all cell pairs of two head outputs, with
/// gradients with respect to the raw (pre-normalization) tensors.
///
/// A pair corresponds when the homography maps the first cell center
/// within [`CORRESPONDENCE_RADIUS`] of the second. Corresponding pairs
/// are pulled toward cosine similarity [`MARGIN_POSITIVE`], all others
/// pushed below [`MARGIN_NEGATIVE`]; the sum is averaged over all pairs.
pub fn descriptor_loss_cells(
    raw_a: &Tensor3,
    raw_b: &Tensor3,
    map: &Homography,
) -> Result<(f64, Tensor3, Tensor3), DetectorError> {
    if raw_a.channels() != raw_b.channels()
        || raw_a.height() != raw_b.height()
        || raw_a.width() != raw_b.width()
    {
        return Err(DetectorError::DimensionMismatch {
            left_width: raw_a.width(),
            left_height: raw_a.height(),
            right_width: raw_b.width(),
            right_height: raw_b.height(),
        });
    }
    let dim = raw_a.channels();
    let (grid_h, grid_w) = (raw_a.height(), raw_a.width());
    let cells = grid_h * grid_w;
    let (da, norms_a) = normalized_cells(raw_a);
    let (db, norms_b) = normalized_cells(raw_b);

    // Mapped centers of the first image's cells, in the second's pixels.
    // A center the homography sends to infinity corresponds to nothing.
    let mapped: Vec<Option<Vector2<f64>>> = (0..cells)
        .map(|cell| {
            let p = Vector2::new(cell_center(cell % grid_w), cell_center(cell / grid_w));
            map.apply(p)
        })
        .collect();

    let scale = 1.0 / (cells * cells) as f64;
    let mut value = 0.0;
    let mut grad_da = vec![0.0; cells * dim];
    let mut grad_db = vec![0.0; cells * dim];
    for i in 0..cells {
        let vi = &da[i * dim..(i + 1) * dim];
        for j in 0..cells {
            let vj = &db[j * dim..(j + 1) * dim];
            let center_j = Vector2::new(cell_center(j % grid_w), cell_center(j / grid_w));
            let corresponds = mapped[i]
                .map(|q| (q - center_j).norm() <= CORRESPONDENCE_RADIUS)
                .unwrap_or(false);
            let dot: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
            let coefficient = if corresponds {
                if MARGIN_POSITIVE - dot > 0.0 {
                    value += scale * (MARGIN_POSITIVE - dot);
                    -scale
                } else {
                    0.0
                }
            } else if dot - MARGIN_NEGATIVE > 0.0 {
                value += scale * (dot - MARGIN_NEGATIVE);
                scale
            } else {
                0.0
            };
            if coefficient != 0.0 {
                for c in 0..dim {
                    grad_da[i * dim + c] += coefficient * vj[c];
                    grad_db[j * dim + c] += coefficient * vi[c];
                }
            }
        }
    }

    let out_a = pull_back_normalization(&da, &grad_da, &norms_a, dim, grid_h, grid_w);
    let out_b = pull_back_normalization(&db, &grad_db, &norms_b, dim, grid_h, grid_w);
    Ok((value, out_a, out_b))
}

/// Chain rule through d = r / |r|: dL/dr = (g - d (d . g)) / |r|.
fn pull_back_normalization(
    directions: &[f64],
    gradients: &[f64],
    norms: &[f64],
    dim: usize,
    grid_h: usize,
    grid_w: usize,
) -> Tensor3 {
    let mut out = Tensor3::zeros(dim, grid_h, grid_w);
    for cell in 0..grid_h * grid_w {
        let (cy, cx) = (cell / grid_w, cell % grid_w);
        let dv = &directions[cell * dim..(cell + 1) * dim];
        let gv = &gradients[cell * dim..(cell + 1) * dim];
        let projected: f64 = dv.iter().zip(gv).map(|(a, b)| a * b).sum();
        for c in 0..dim {
            out.set(c, cy, cx, (gv[c] - dv[c] * projected) / norms[cell]);
        }
    }
    out
}

/// Value-only variant of [`descriptor_loss_cells`].
pub fn descriptor_loss(
    raw_a: &Tensor3,
    raw_b: &Tensor3,
    map: &Homography,
) -> Result<f64, DetectorError> {
    descriptor_loss_cells(raw_a, raw_b, map).map(|(value, _, _)| value)
}
