//! Pseudo ground truth for self-supervised training: a handcrafted
//! multi-scale blob detector seeds the first round, and once a network
//! exists its own detections are folded into the label set.

use super::{decode_keypoints, forward, DetectorError, ForwardOptions, Keypoint, NetworkWeights};
use crate::image::{RadiometricImage, MAX_COUNT};
use nalgebra::Vector2;

/// Binary per-pixel keypoint labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl LabelMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_points(
        width: usize,
        height: usize,
        points: &[(usize, usize)],
    ) -> Result<Self, DetectorError> {
        let mut map = Self::zeros(width, height);
        for &(x, y) in points {
            if x >= width || y >= height {
                return Err(DetectorError::PointOutOfBounds { x, y, width, height });
            }
            map.data[y * width + x] = true;
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub(crate) fn get_index(&self, index: usize) -> bool {
        self.data[index]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = true;
    }
}

/// Center/surround radii of the difference-of-boxes pyramid.
const BLOB_SCALES: [(usize, usize); 3] = [(1, 3), (2, 5), (4, 9)];
/// Candidates below this fraction of the strongest response are dropped.
const RELATIVE_RESPONSE_FLOOR: f64 = 0.01;
/// Responses below this (on normalized intensities) never fire; keeps a
/// flat image from producing labels out of rounding noise.
const ABSOLUTE_RESPONSE_FLOOR: f64 = 1e-4;
/// Suppression radius shared by the handcrafted and learned sources.
const LABEL_NMS_RADIUS: usize = 8;
/// Decode threshold applied to an existing network's heatmap.
const LABEL_DECODE_THRESHOLD: f64 = 0.3;

/// Summed-area table over normalized intensities, with one row/column of
/// zeros so rectangle sums need no special cases.
struct IntegralImage {
    width: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    fn new(image: &RadiometricImage) -> Self {
        let (w, h) = (image.width(), image.height());
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                sums[(y + 1) * (w + 1) + (x + 1)] = image.value(x, y) / MAX_COUNT
                    + sums[y * (w + 1) + (x + 1)]
                    + sums[(y + 1) * (w + 1) + x]
                    - sums[y * (w + 1) + x];
            }
        }
        Self { width: w, sums }
    }

    /// Mean over the box of radius `r` around `(x, y)`, clipped to the
    /// image so border responses stay comparable to interior ones.
    fn box_mean(&self, x: usize, y: usize, r: usize, width: usize, height: usize) -> f64 {
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + r).min(width - 1) + 1;
        let y1 = (y + r).min(height - 1) + 1;
        let stride = self.width + 1;
        let sum = self.sums[y1 * stride + x1] - self.sums[y0 * stride + x1]
            - self.sums[y1 * stride + x0]
            + self.sums[y0 * stride + x0];
        sum / ((x1 - x0) * (y1 - y0)) as f64
    }
}

/// Multi-scale difference-of-boxes blob detector. Returns local maxima of
/// the scale-max response, non-maximum suppressed, scores normalized to
/// (0, 1] (the strongest response scores exactly 1).
pub fn handcrafted_keypoints(image: &RadiometricImage, max_points: usize) -> Vec<Keypoint> {
    let (w, h) = (image.width(), image.height());
    let integral = IntegralImage::new(image);
    let mut response = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f64;
            for (center, surround) in BLOB_SCALES {
                let contrast = (integral.box_mean(x, y, center, w, h)
                    - integral.box_mean(x, y, surround, w, h))
                .abs();
                best = best.max(contrast);
            }
            response[y * w + x] = best;
        }
    }
    let peak = response.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = (peak * RELATIVE_RESPONSE_FLOOR).max(ABSOLUTE_RESPONSE_FLOOR);
    if peak < ABSOLUTE_RESPONSE_FLOOR {
        return Vec::new();
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let value = response[y * w + x];
            if value < floor {
                continue;
            }
            let mut is_max = true;
            'neighbors: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if response[ny as usize * w + nx as usize] > value {
                        is_max = false;
                        break 'neighbors;
                    }
                }
            }
            if is_max {
                candidates.push((value, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let radius = LABEL_NMS_RADIUS as isize;
    let mut accepted: Vec<(isize, isize)> = Vec::new();
    let mut keypoints = Vec::new();
    for (value, y, x) in candidates {
        if keypoints.len() >= max_points {
            break;
        }
        let (xi, yi) = (x as isize, y as isize);
        if accepted
            .iter()
            .any(|&(ax, ay)| (ax - xi).abs().max((ay - yi).abs()) <= radius)
        {
            continue;
        }
        accepted.push((xi, yi));
        keypoints.push(Keypoint {
            position: Vector2::new(x as f64, y as f64),
            score: value / peak,
        });
    }
    keypoints
}

/// Labels for one training image: the handcrafted detections, plus the
/// decoded detections of `base` when a network already exists. The union
/// lets successive training rounds keep points the handcrafted detector
/// finds while adding ones the network has learned.
pub fn generate_pseudo_labels(
    image: &RadiometricImage,
    base: Option<&NetworkWeights>,
    max_points: usize,
) -> Result<LabelMap, DetectorError> {
    let mut labels = LabelMap::zeros(image.width(), image.height());
    for keypoint in handcrafted_keypoints(image, max_points) {
        labels.set(keypoint.position.x as usize, keypoint.position.y as usize);
    }
    if let Some(weights) = base {
        let (heatmap, _) = forward(weights, image, ForwardOptions::default())?;
        for keypoint in
            decode_keypoints(&heatmap, LABEL_DECODE_THRESHOLD, LABEL_NMS_RADIUS, max_points)
        {
            labels.set(keypoint.position.x as usize, keypoint.position.y as usize);
        }
    }
    Ok(labels)
}
