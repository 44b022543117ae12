//! Radiometric feature tracking: pyramidal inverse-compositional alignment
//! of fixed reference patches on full 16-bit counts, with gain-invariant
//! mean-normalized residuals, gyro-based motion seeding, and track
//! lifecycle management (culling and grid-based replenishment).

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::image::{ImagePyramid, RadiometricImage};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error("patch support around ({x:.2}, {y:.2}) exits the {width}x{height} image")]
    SupportOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("patch mean {mean} is not positive")]
    DegeneratePatch { mean: f64 },
    #[error("flat patch: alignment normal equations are singular")]
    Untrackable,
    #[error("pyramid has {got} levels, tracker configured for {expected}")]
    LevelMismatch { got: usize, expected: usize },
    #[error("observation for frame {frame} must follow frame {last}")]
    NonMonotoneFrame { frame: u64, last: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Planar rigid warp applied to patch-local offsets: `u -> R(angle) u + t`.
/// The angle is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpSe2 {
    angle: f64,
    translation: Vector2<f64>,
}

impl WarpSe2 {
    pub fn new(angle: f64, translation: Vector2<f64>) -> Self {
        let mut a = angle % std::f64::consts::TAU;
        if a > std::f64::consts::PI {
            a -= std::f64::consts::TAU;
        } else if a <= -std::f64::consts::PI {
            a += std::f64::consts::TAU;
        }
        Self { angle: a, translation }
    }

    pub fn identity() -> Self {
        Self { angle: 0.0, translation: Vector2::zeros() }
    }

    pub fn translation(translation: Vector2<f64>) -> Self {
        Self { angle: 0.0, translation }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn translation_vector(&self) -> Vector2<f64> {
        self.translation
    }

    /// Applies the warp to a patch-local offset.
    pub fn apply(&self, offset: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.angle.sin_cos();
        Vector2::new(
            c * offset.x - s * offset.y + self.translation.x,
            s * offset.x + c * offset.y + self.translation.y,
        )
    }

    /// Rescales the translation for a neighboring pyramid level.
    fn scaled_translation(&self, factor: f64) -> Self {
        Self { angle: self.angle, translation: self.translation * factor }
    }
}

/// A fixed reference template: mean-normalized values and gradients on the
/// square support `[-half_size, half_size]^2` around a sub-pixel center.
#[derive(Debug, Clone)]
pub struct Patch {
    center: Vector2<f64>,
    half_size: usize,
    mean: f64,
    /// Reference values divided by `mean`, row-major over the support.
    normalized: Vec<f64>,
    /// Central-difference gradients of the normalized values.
    gradients: Vec<Vector2<f64>>,
}

impl Patch {
    /// Samples the support (plus a one-pixel apron for gradients) with
    /// bilinear interpolation. The support and apron must lie inside the
    /// image and the patch mean must be positive.
    pub fn extract(
        image: &RadiometricImage,
        center: Vector2<f64>,
        half_size: usize,
    ) -> Result<Self, TrackerError> {
        assert!(half_size >= 2, "patch half-size must be at least 2");
        let reach = (half_size + 1) as f64;
        let max_x = (image.width() - 1) as f64;
        let max_y = (image.height() - 1) as f64;
        if center.x - reach < 0.0
            || center.y - reach < 0.0
            || center.x + reach > max_x
            || center.y + reach > max_y
        {
            return Err(TrackerError::SupportOutOfBounds {
                x: center.x,
                y: center.y,
                width: image.width(),
                height: image.height(),
            });
        }
        let side = 2 * half_size + 1;
        let apron_side = side + 2;
        let h = half_size as isize;
        let mut raw = Vec::with_capacity(apron_side * apron_side);
        for dy in -(h + 1)..=(h + 1) {
            for dx in -(h + 1)..=(h + 1) {
                let v = image
                    .bilinear_sample(center.x + dx as f64, center.y + dy as f64)
                    .expect("support bounds checked above");
                raw.push(v);
            }
        }
        let at = |dx: isize, dy: isize| raw[((dy + h + 1) * apron_side as isize + dx + h + 1) as usize];
        let mut sum = 0.0;
        for dy in -h..=h {
            for dx in -h..=h {
                sum += at(dx, dy);
            }
        }
        let mean = sum / (side * side) as f64;
        if mean <= 0.0 {
            return Err(TrackerError::DegeneratePatch { mean });
        }
        let mut normalized = Vec::with_capacity(side * side);
        let mut gradients = Vec::with_capacity(side * side);
        for dy in -h..=h {
            for dx in -h..=h {
                normalized.push(at(dx, dy) / mean);
                gradients.push(Vector2::new(
                    (at(dx + 1, dy) - at(dx - 1, dy)) / (2.0 * mean),
                    (at(dx, dy + 1) - at(dx, dy - 1)) / (2.0 * mean),
                ));
            }
        }
        Ok(Self { center, half_size, mean, normalized, gradients })
    }

    pub fn center(&self) -> Vector2<f64> {
        self.center
    }

    pub fn half_size(&self) -> usize {
        self.half_size
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    fn offsets(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        let h = self.half_size as isize;
        (-h..=h).flat_map(move |dy| (-h..=h).map(move |dx| Vector2::new(dx as f64, dy as f64)))
    }

    fn len(&self) -> usize {
        self.normalized.len()
    }
}

/// Gain-invariant residual of a patch against a target image under a warp:
/// each target sample is divided by the mean of all warped samples, each
/// reference value by the reference mean, and the difference taken.
/// Returns the residual vector and the warped-support target mean.
pub fn radiometric_residual(
    patch: &Patch,
    target: &RadiometricImage,
    warp: &WarpSe2,
) -> Result<(Vec<f64>, f64), TrackerError> {
    let mut samples = Vec::with_capacity(patch.len());
    for offset in patch.offsets() {
        let p = patch.center + warp.apply(offset);
        match target.bilinear_sample(p.x, p.y) {
            Some(v) => samples.push(v),
            None => {
                return Err(TrackerError::SupportOutOfBounds {
                    x: p.x,
                    y: p.y,
                    width: target.width(),
                    height: target.height(),
                });
            }
        }
    }
    let target_mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if target_mean <= 0.0 {
        return Err(TrackerError::DegeneratePatch { mean: target_mean });
    }
    let residual = samples
        .iter()
        .zip(&patch.normalized)
        .map(|(&s, &t)| s / target_mean - t)
        .collect();
    Ok((residual, target_mean))
}

fn mean_squared(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// Tuning knobs for alignment and track lifecycle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub patch_half_size: usize,
    pub pyramid_levels: usize,
    /// Gauss-Newton iteration cap per pyramid level.
    pub max_iterations: usize,
    /// Step norm (pixels at the current level) below which alignment stops.
    pub convergence_threshold: f64,
    /// Mean squared normalized residual above which a track is culled.
    pub cull_threshold: f64,
    /// Replenishment grid pitch, pixels.
    pub grid_cell_size: usize,
    pub max_features: usize,
    /// Estimate the in-plane rotation angle (otherwise translation only).
    pub estimate_rotation: bool,
    /// Nominal inter-frame period, seconds; gaps beyond 1.5x of this switch
    /// alignment into the long-gap regime.
    pub nominal_frame_period: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            patch_half_size: 5,
            pyramid_levels: 3,
            max_iterations: 30,
            convergence_threshold: 0.01,
            cull_threshold: 0.0025,
            grid_cell_size: 32,
            max_features: 160,
            estimate_rotation: false,
            nominal_frame_period: 0.05,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.patch_half_size < 2 {
            return Err(TrackerError::Config("patch half-size must be at least 2".into()));
        }
        if self.pyramid_levels == 0 || self.max_iterations == 0 || self.max_features == 0 {
            return Err(TrackerError::Config("counts must be positive".into()));
        }
        if !(self.convergence_threshold > 0.0)
            || !(self.cull_threshold > 0.0)
            || !(self.nominal_frame_period > 0.0)
        {
            return Err(TrackerError::Config("thresholds must be positive".into()));
        }
        if self.grid_cell_size == 0 {
            return Err(TrackerError::Config("grid cell size must be positive".into()));
        }
        Ok(())
    }
}

/// Iteration budget for the coarsest level: doubled after a long camera
/// suspension so the search can absorb the larger seed error.
pub fn coarsest_iteration_budget(cfg: &TrackerConfig, frame_gap: f64) -> usize {
    if frame_gap > 1.5 * cfg.nominal_frame_period {
        2 * cfg.max_iterations
    } else {
        cfg.max_iterations
    }
}

/// Outcome of one Gauss-Newton alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub warp: WarpSe2,
    /// Mean squared normalized residual at the returned warp.
    pub dissimilarity: f64,
    pub converged: bool,
}

/// Inverse-compositional Gauss-Newton. The Jacobian and normal matrix come
/// from the reference patch once; each accepted step must not increase the
/// dissimilarity (enforced by step halving), so the returned value is
/// never above the dissimilarity of the initial warp.
pub fn align_patch(
    patch: &Patch,
    target: &RadiometricImage,
    initial: WarpSe2,
    max_iterations: usize,
    cfg: &TrackerConfig,
) -> Result<Alignment, TrackerError> {
    let rotation = cfg.estimate_rotation;
    // Precomputed steepest-descent rows: (angle, tx, ty) or (tx, ty).
    let rows: Vec<Vector3<f64>> = patch
        .offsets()
        .zip(&patch.gradients)
        .map(|(u, g)| Vector3::new(g.x * (-u.y) + g.y * u.x, g.x, g.y))
        .collect();
    let solve: Box<dyn Fn(&[f64]) -> Option<Vector3<f64>>> = if rotation {
        let mut h = Matrix3::zeros();
        for r in &rows {
            h += r * r.transpose();
        }
        let chol = nalgebra::Cholesky::new(h).ok_or(TrackerError::Untrackable)?;
        Box::new(move |res: &[f64]| {
            let mut b = Vector3::zeros();
            for (r, &e) in rows.iter().zip(res) {
                b += r * e;
            }
            Some(chol.solve(&b))
        })
    } else {
        let mut h = Matrix2::zeros();
        for r in &rows {
            let g = Vector2::new(r.y, r.z);
            h += g * g.transpose();
        }
        let chol = nalgebra::Cholesky::new(h).ok_or(TrackerError::Untrackable)?;
        Box::new(move |res: &[f64]| {
            let mut b = Vector2::zeros();
            for (r, &e) in rows.iter().zip(res) {
                b += Vector2::new(r.y, r.z) * e;
            }
            let t = chol.solve(&b);
            Some(Vector3::new(0.0, t.x, t.y))
        })
    };

    // The initial warp must land inside the target (hard error), while
    // trial steps that exit are merely rejected.
    let (mut residual, _) = radiometric_residual(patch, target, &initial)?;
    let mut warp = initial;
    let mut dissim = mean_squared(&residual);
    let mut converged = false;

    for _ in 0..max_iterations {
        let delta = solve(&residual).ok_or(TrackerError::Untrackable)?;
        let step_px = delta.yz().norm() + delta.x.abs() * patch.half_size as f64;
        if step_px < cfg.convergence_threshold {
            converged = true;
            break;
        }
        // Inverse composition: W <- W o dW^-1, with up to 8 halvings.
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let d_angle = delta.x * scale;
            let d_t = delta.yz() * scale;
            let candidate = if rotation {
                let new_angle = warp.angle - d_angle;
                let (s, c) = new_angle.sin_cos();
                let rotated = Vector2::new(c * d_t.x - s * d_t.y, s * d_t.x + c * d_t.y);
                WarpSe2::new(new_angle, warp.translation - rotated)
            } else {
                WarpSe2::translation(warp.translation - d_t)
            };
            if let Ok((r, _)) = radiometric_residual(patch, target, &candidate) {
                let d = mean_squared(&r);
                if d <= dissim {
                    warp = candidate;
                    dissim = d;
                    residual = r;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(Alignment { warp, dissimilarity: dissim, converged })
}

/// Rotation-only pixel prediction: the inter-frame body rotation is mapped
/// through the camera extrinsics and applied to the pixel ray,
/// `x' = K R_cam K^-1 x`. Points leaving the front of the camera fall back
/// to the unmoved input point.
pub fn imu_seed(
    body_delta: &UnitQuaternion<f64>,
    camera: &CameraModel,
    point: Vector2<f64>,
) -> Vector2<f64> {
    let r_cb = camera.body_to_camera.rotation;
    let r_cam = r_cb * body_delta.inverse() * r_cb.inverse();
    camera
        .project(&(r_cam * camera.unproject(point)))
        .unwrap_or(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Alive,
    Culled,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Alive => "alive",
            TrackStatus::Culled => "culled",
        }
    }
}

/// One feature's observation history.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    id: u64,
    observations: Vec<(u64, Vector2<f64>)>,
    status: TrackStatus,
}

impl FeatureTrack {
    pub fn new(id: u64, frame: u64, position: Vector2<f64>) -> Self {
        Self { id, observations: vec![(frame, position)], status: TrackStatus::Alive }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn status(&self) -> TrackStatus {
        self.status
    }

    pub fn is_alive(&self) -> bool {
        self.status == TrackStatus::Alive
    }

    pub fn length(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[(u64, Vector2<f64>)] {
        &self.observations
    }

    pub fn latest(&self) -> (u64, Vector2<f64>) {
        *self.observations.last().expect("tracks are created with one observation")
    }

    /// Appends an observation; frames must advance strictly.
    pub fn push_observation(
        &mut self,
        frame: u64,
        position: Vector2<f64>,
    ) -> Result<(), TrackerError> {
        let (last, _) = self.latest();
        if frame <= last {
            return Err(TrackerError::NonMonotoneFrame { frame, last });
        }
        self.observations.push((frame, position));
        Ok(())
    }

    pub fn cull(&mut self) {
        self.status = TrackStatus::Culled;
    }
}

/// A live feature: its track plus the per-level reference templates fixed
/// at spawn and the accumulated warp from the spawn position.
#[derive(Debug, Clone)]
pub struct TrackedFeature {
    pub track: FeatureTrack,
    templates: Vec<Patch>,
    warp: WarpSe2,
}

impl TrackedFeature {
    /// Extracts reference templates at every pyramid level. Fails when any
    /// level's support (with gradient apron) exits that level.
    pub fn spawn(
        id: u64,
        frame: u64,
        position: Vector2<f64>,
        pyramid: &ImagePyramid,
        cfg: &TrackerConfig,
    ) -> Result<Self, TrackerError> {
        if pyramid.levels() != cfg.pyramid_levels {
            return Err(TrackerError::LevelMismatch {
                got: pyramid.levels(),
                expected: cfg.pyramid_levels,
            });
        }
        let templates = (0..cfg.pyramid_levels)
            .map(|level| {
                let scale = (1u32 << level) as f64;
                Patch::extract(pyramid.level(level), position / scale, cfg.patch_half_size)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { track: FeatureTrack::new(id, frame, position), templates, warp: WarpSe2::identity() })
    }

    /// Current sub-pixel position in finest-level coordinates.
    pub fn position(&self) -> Vector2<f64> {
        self.track.latest().1
    }
}

/// Per-call tracking statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrackSummary {
    pub survived: usize,
    pub culled: usize,
}

/// Tracks every live feature into the next frame: the gyro rotation seeds
/// the coarsest level, each level's result is doubled into the next finer
/// one, and a track is culled when any level fails, the support leaves the
/// image, or the finest-level dissimilarity exceeds the cull threshold.
/// `frame_gap` is the elapsed time since the previous frame; long gaps get
/// a doubled coarsest-level iteration budget.
pub fn track_frame(
    features: &mut [TrackedFeature],
    next: &ImagePyramid,
    body_delta: &UnitQuaternion<f64>,
    camera: &CameraModel,
    frame: u64,
    frame_gap: f64,
    cfg: &TrackerConfig,
) -> Result<TrackSummary, TrackerError> {
    cfg.validate()?;
    if next.levels() != cfg.pyramid_levels {
        return Err(TrackerError::LevelMismatch {
            got: next.levels(),
            expected: cfg.pyramid_levels,
        });
    }
    let coarsest = cfg.pyramid_levels - 1;
    let coarse_budget = coarsest_iteration_budget(cfg, frame_gap);
    let mut summary = TrackSummary::default();

    'features: for feature in features.iter_mut() {
        if !feature.track.is_alive() {
            continue;
        }
        let seeded = imu_seed(body_delta, camera, feature.position());
        let scale = (1u32 << coarsest) as f64;
        let mut warp = WarpSe2::new(
            feature.warp.angle(),
            (seeded - feature.templates[0].center()) / scale,
        );
        let mut dissim = f64::INFINITY;
        for level in (0..cfg.pyramid_levels).rev() {
            let budget = if level == coarsest { coarse_budget } else { cfg.max_iterations };
            match align_patch(&feature.templates[level], next.level(level), warp, budget, cfg) {
                Ok(result) => {
                    dissim = result.dissimilarity;
                    warp = if level > 0 {
                        result.warp.scaled_translation(2.0)
                    } else {
                        result.warp
                    };
                }
                Err(
                    TrackerError::SupportOutOfBounds { .. }
                    | TrackerError::DegeneratePatch { .. }
                    | TrackerError::Untrackable,
                ) => {
                    feature.track.cull();
                    summary.culled += 1;
                    continue 'features;
                }
                Err(other) => return Err(other),
            }
        }
        if dissim > cfg.cull_threshold {
            feature.track.cull();
            summary.culled += 1;
            continue;
        }
        let position = feature.templates[0].center() + warp.apply(Vector2::zeros());
        feature.track.push_observation(frame, position)?;
        feature.warp = warp;
        summary.survived += 1;
    }
    Ok(summary)
}

/// Spawns tracks from detector candidates (highest score first) into grid
/// cells not already holding a live track, stopping at the feature budget.
/// Candidates whose template support exits any pyramid level are skipped.
/// Returns the number of tracks spawned.
pub fn replenish_features(
    features: &mut Vec<TrackedFeature>,
    candidates: &[(Vector2<f64>, f64)],
    pyramid: &ImagePyramid,
    frame: u64,
    next_id: &mut u64,
    cfg: &TrackerConfig,
) -> Result<usize, TrackerError> {
    cfg.validate()?;
    let cell_of = |p: Vector2<f64>| {
        (
            (p.x.max(0.0) as usize) / cfg.grid_cell_size,
            (p.y.max(0.0) as usize) / cfg.grid_cell_size,
        )
    };
    let mut occupied: HashSet<(usize, usize)> = features
        .iter()
        .filter(|f| f.track.is_alive())
        .map(|f| cell_of(f.position()))
        .collect();
    let mut alive = features.iter().filter(|f| f.track.is_alive()).count();

    let mut order: Vec<&(Vector2<f64>, f64)> = candidates.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut spawned = 0;
    for (position, _) in order {
        if alive >= cfg.max_features {
            break;
        }
        let cell = cell_of(*position);
        if occupied.contains(&cell) {
            continue;
        }
        match TrackedFeature::spawn(*next_id, frame, *position, pyramid, cfg) {
            Ok(feature) => {
                *next_id += 1;
                occupied.insert(cell);
                alive += 1;
                spawned += 1;
                features.push(feature);
            }
            Err(TrackerError::SupportOutOfBounds { .. })
            | Err(TrackerError::DegeneratePatch { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    Ok(spawned)
}

/// Dumps every observation of every track as
/// `frame,track_id,x,y,length,status` rows, ordered by frame then id.
/// `length` counts observations up to and including the row's frame;
/// `status` is the track's final state.
pub fn write_tracks_csv<'a>(
    path: &Path,
    tracks: impl IntoIterator<Item = &'a FeatureTrack>,
) -> Result<(), TrackerError> {
    let mut rows: Vec<(u64, u64, String)> = Vec::new();
    for track in tracks {
        for (index, (frame, position)) in track.observations().iter().enumerate() {
            rows.push((
                *frame,
                track.id(),
                format!(
                    "{},{},{},{},{},{}",
                    frame,
                    track.id(),
                    position.x,
                    position.y,
                    index + 1,
                    track.status().as_str()
                ),
            ));
        }
    }
    rows.sort_by_key(|(frame, id, _)| (*frame, *id));
    let io_err = |source: std::io::Error| TrackerError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    (|| {
        writeln!(w, "frame,track_id,x,y,length,status")?;
        for (_, _, row) in &rows {
            writeln!(w, "{row}")?;
        }
        w.flush()
    })()
    .map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::build_pyramid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Smooth multi-scale field: coarse waves for pyramid seeding plus fine
    /// detail for sharp convergence, rendered at an arbitrary shift.
    fn field(x: f64, y: f64) -> f64 {
        9000.0
            + 3000.0 * (x / 9.0).sin()
            + 2400.0 * ((x + y) / 13.0).cos()
            + 2000.0 * (y / 7.0).sin()
            + 800.0 * (x / 3.1).sin()
            + 600.0 * (y / 2.7).cos()
    }

    fn render(width: usize, height: usize, shift: Vector2<f64>) -> RadiometricImage {
        RadiometricImage::from_fn(width, height, 0.0, |x, y| {
            field(x as f64 - shift.x, y as f64 - shift.y)
        })
        .unwrap()
    }

    fn cfg() -> TrackerConfig {
        TrackerConfig::default()
    }

    fn camera() -> CameraModel {
        CameraModel::forward_rig(400.0, 400.0, 63.5, 47.5, 0.0)
    }

    #[test]
    fn residual_zero_on_reference() {
        let image = render(64, 64, Vector2::zeros());
        let patch = Patch::extract(&image, Vector2::new(30.0, 30.0), 5).unwrap();
        let (r, _) = radiometric_residual(&patch, &image, &WarpSe2::identity()).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_is_gain_invariant() {
        let image = render(64, 64, Vector2::zeros());
        let patch = Patch::extract(&image, Vector2::new(30.0, 30.0), 5).unwrap();
        // Pure gain on the target cancels exactly.
        let gained = RadiometricImage::from_fn(64, 64, 0.0, |x, y| 2.37 * image.value(x, y))
            .unwrap();
        let (r, _) = radiometric_residual(&patch, &gained, &WarpSe2::identity()).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-12), "max {:?}", r.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
        // And for an unrelated target, scaling changes nothing element-wise.
        let other = render(64, 64, Vector2::new(0.7, -0.4));
        let scaled =
            RadiometricImage::from_fn(64, 64, 0.0, |x, y| 3.0 * other.value(x, y)).unwrap();
        let warp = WarpSe2::translation(Vector2::new(1.2, -0.5));
        let (r0, _) = radiometric_residual(&patch, &other, &warp).unwrap();
        let (r1, _) = radiometric_residual(&patch, &scaled, &warp).unwrap();
        for (a, b) in r0.iter().zip(&r1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_cancels_integer_shift() {
        let reference = render(64, 64, Vector2::zeros());
        // Content moved one pixel to the right.
        let shifted = RadiometricImage::from_fn(64, 64, 0.0, |x, y| {
            field(x as f64 - 1.0, y as f64)
        })
        .unwrap();
        let patch = Patch::extract(&reference, Vector2::new(30.0, 30.0), 5).unwrap();
        let warp = WarpSe2::translation(Vector2::new(1.0, 0.0));
        let (r, _) = radiometric_residual(&patch, &shifted, &warp).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn residual_reports_out_of_bounds() {
        let image = render(64, 64, Vector2::zeros());
        let patch = Patch::extract(&image, Vector2::new(30.0, 30.0), 5).unwrap();
        let warp = WarpSe2::translation(Vector2::new(40.0, 0.0));
        assert!(matches!(
            radiometric_residual(&patch, &image, &warp),
            Err(TrackerError::SupportOutOfBounds { .. })
        ));
    }

    #[test]
    fn align_on_reference_converges_immediately() {
        let image = render(64, 64, Vector2::zeros());
        let patch = Patch::extract(&image, Vector2::new(30.0, 30.0), 5).unwrap();
        let result = align_patch(&patch, &image, WarpSe2::identity(), 30, &cfg()).unwrap();
        assert!(result.converged);
        assert!(result.dissimilarity < 1e-12);
        assert_relative_eq!(result.warp.translation_vector().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn align_recovers_subpixel_translation() {
        let reference = render(96, 96, Vector2::zeros());
        let target = render(96, 96, Vector2::new(3.37, 0.0));
        let patch = Patch::extract(&reference, Vector2::new(45.0, 47.0), 5).unwrap();
        let result = align_patch(&patch, &target, WarpSe2::identity(), 30, &cfg()).unwrap();
        assert!(result.converged);
        let t = result.warp.translation_vector();
        assert!(
            (t - Vector2::new(3.37, 0.0)).norm() < 0.05,
            "recovered {t:?} instead of (3.37, 0)"
        );
    }

    #[test]
    fn flat_patch_is_untrackable() {
        let flat = RadiometricImage::constant(32, 32, 0.0, 5000.0).unwrap();
        let patch = Patch::extract(&flat, Vector2::new(16.0, 16.0), 5).unwrap();
        assert!(matches!(
            align_patch(&patch, &flat, WarpSe2::identity(), 30, &cfg()),
            Err(TrackerError::Untrackable)
        ));
    }

    #[test]
    fn rotation_mode_recovers_in_plane_rotation() {
        let reference = render(96, 96, Vector2::zeros());
        let angle = 0.06_f64;
        let center = Vector2::new(48.0, 48.0);
        // Target content rotated about the patch center.
        let (s, c) = (-angle).sin_cos();
        let target = RadiometricImage::from_fn(96, 96, 0.0, |x, y| {
            let d = Vector2::new(x as f64 - center.x, y as f64 - center.y);
            let src = Vector2::new(c * d.x - s * d.y, s * d.x + c * d.y) + center;
            field(src.x, src.y)
        })
        .unwrap();
        let patch = Patch::extract(&reference, center, 7).unwrap();
        let mut config = cfg();
        config.estimate_rotation = true;
        let result = align_patch(&patch, &target, WarpSe2::identity(), 60, &config).unwrap();
        assert!(result.converged);
        assert!(
            (result.warp.angle() - angle).abs() < 0.01,
            "recovered angle {} instead of {angle}",
            result.warp.angle()
        );
    }

    #[test]
    fn imu_seed_identity_and_yaw_and_fallback() {
        let cam = camera();
        let point = Vector2::new(63.5, 47.5);
        // Identity rotation keeps the point.
        assert_eq!(imu_seed(&UnitQuaternion::identity(), &cam, point), point);
        // A small yaw moves the center pixel by about f tan(angle).
        let yaw = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 0.01));
        let moved = imu_seed(&yaw, &cam, point);
        assert_relative_eq!((moved - point).x.abs(), 400.0 * 0.01f64.tan(), epsilon = 1e-3);
        assert_relative_eq!(moved.y, point.y, epsilon = 1e-9);
        // A half-turn maps the ray behind the camera: fall back to the input.
        let flip = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::PI));
        assert_eq!(imu_seed(&flip, &cam, point), point);
    }

    fn spawn_grid_features(
        pyramid: &ImagePyramid,
        cfg: &TrackerConfig,
        next_id: &mut u64,
    ) -> Vec<TrackedFeature> {
        let mut features = Vec::new();
        for gy in 0..3 {
            for gx in 0..3 {
                let position = Vector2::new(30.0 + 22.0 * gx as f64, 28.0 + 20.0 * gy as f64);
                features.push(
                    TrackedFeature::spawn(*next_id, 0, position, pyramid, cfg).unwrap(),
                );
                *next_id += 1;
            }
        }
        features
    }

    #[test]
    fn identical_frames_track_in_place() {
        let image = render(128, 96, Vector2::zeros());
        let config = cfg();
        let pyramid = build_pyramid(&image, config.pyramid_levels).unwrap();
        let mut next_id = 0;
        let mut features = spawn_grid_features(&pyramid, &config, &mut next_id);
        let before: Vec<Vector2<f64>> = features.iter().map(|f| f.position()).collect();
        let summary = track_frame(
            &mut features,
            &pyramid,
            &UnitQuaternion::identity(),
            &camera(),
            1,
            0.05,
            &config,
        )
        .unwrap();
        assert_eq!(summary.survived, features.len());
        assert_eq!(summary.culled, 0);
        for (feature, original) in features.iter().zip(&before) {
            assert!((feature.position() - original).norm() < 1e-6);
            assert_eq!(feature.track.length(), 2);
        }
    }

    #[test]
    fn pyramid_recovers_large_shift() {
        // 12 px exceeds the single-level convergence basin; the coarsest
        // level sees it as 3 px and the descent refines it.
        let shift = Vector2::new(12.0, 0.0);
        let reference = render(128, 96, Vector2::zeros());
        let target = render(128, 96, shift);
        let config = cfg();
        let prev = build_pyramid(&reference, config.pyramid_levels).unwrap();
        let next = build_pyramid(&target, config.pyramid_levels).unwrap();
        let mut next_id = 0;
        let mut features = spawn_grid_features(&prev, &config, &mut next_id);
        let before: Vec<Vector2<f64>> = features.iter().map(|f| f.position()).collect();
        let summary = track_frame(
            &mut features,
            &next,
            &UnitQuaternion::identity(),
            &camera(),
            1,
            0.05,
            &config,
        )
        .unwrap();
        assert_eq!(summary.survived, features.len());
        for (feature, original) in features.iter().zip(&before) {
            let moved = feature.position() - original;
            assert!(
                (moved - shift).norm() < 0.1,
                "track {} drifted: {moved:?}",
                feature.track.id()
            );
        }
    }

    #[test]
    fn composed_tracking_stays_near_direct_ground_truth() {
        let s1 = Vector2::new(4.3, -2.1);
        let s2 = Vector2::new(-1.7, 3.4);
        let frame_a = render(128, 96, Vector2::zeros());
        let frame_b = render(128, 96, s1);
        let frame_c = render(128, 96, s1 + s2);
        let config = cfg();
        let pyr_a = build_pyramid(&frame_a, config.pyramid_levels).unwrap();
        let pyr_b = build_pyramid(&frame_b, config.pyramid_levels).unwrap();
        let pyr_c = build_pyramid(&frame_c, config.pyramid_levels).unwrap();
        let mut next_id = 0;
        let mut features = spawn_grid_features(&pyr_a, &config, &mut next_id);
        let start: Vec<Vector2<f64>> = features.iter().map(|f| f.position()).collect();
        for (frame, pyr) in [(1u64, &pyr_b), (2, &pyr_c)] {
            track_frame(
                &mut features,
                pyr,
                &UnitQuaternion::identity(),
                &camera(),
                frame,
                0.05,
                &config,
            )
            .unwrap();
        }
        for (feature, origin) in features.iter().zip(&start) {
            assert!(feature.track.is_alive());
            let expected = origin + s1 + s2;
            assert!(
                (feature.position() - expected).norm() < 0.2,
                "composition drift {:?}",
                feature.position() - expected
            );
        }
    }

    #[test]
    fn exiting_tracks_are_culled_without_observation() {
        let reference = render(128, 96, Vector2::zeros());
        let config = cfg();
        let pyramid = build_pyramid(&reference, config.pyramid_levels).unwrap();
        let mut features = vec![
            TrackedFeature::spawn(0, 0, Vector2::new(96.0, 48.0), &pyramid, &config).unwrap(),
        ];
        // A strong yaw predicts the feature far beyond the right border:
        // f tan(0.3) is about 124 px of seed motion.
        let yaw = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 0.3));
        let summary =
            track_frame(&mut features, &pyramid, &yaw, &camera(), 1, 0.05, &config).unwrap();
        assert_eq!(summary.culled, 1);
        assert!(!features[0].track.is_alive());
        assert_eq!(features[0].track.length(), 1);
    }

    #[test]
    fn dissimilar_appearance_is_culled() {
        let reference = render(128, 96, Vector2::zeros());
        // A structurally different target: same mean level, other texture.
        let target = RadiometricImage::from_fn(128, 96, 0.0, |x, y| {
            9000.0 + 4000.0 * (((x / 4) + (y / 4)) % 2) as f64
        })
        .unwrap();
        let config = cfg();
        let prev = build_pyramid(&reference, config.pyramid_levels).unwrap();
        let next = build_pyramid(&target, config.pyramid_levels).unwrap();
        let mut features = vec![
            TrackedFeature::spawn(0, 0, Vector2::new(64.0, 48.0), &prev, &config).unwrap(),
        ];
        let summary = track_frame(
            &mut features,
            &next,
            &UnitQuaternion::identity(),
            &camera(),
            1,
            0.05,
            &config,
        )
        .unwrap();
        assert_eq!(summary.culled, 1);
    }

    #[test]
    fn long_gap_doubles_coarsest_budget() {
        let config = cfg();
        assert_eq!(coarsest_iteration_budget(&config, 0.05), config.max_iterations);
        assert_eq!(coarsest_iteration_budget(&config, 0.074), config.max_iterations);
        assert_eq!(coarsest_iteration_budget(&config, 0.076), 2 * config.max_iterations);
        assert_eq!(coarsest_iteration_budget(&config, 0.55), 2 * config.max_iterations);
    }

    #[test]
    fn replenish_respects_budget_and_grid() {
        let image = render(128, 96, Vector2::zeros());
        let mut config = cfg();
        config.grid_cell_size = 16;
        config.max_features = 12;
        let pyramid = build_pyramid(&image, config.pyramid_levels).unwrap();
        let mut next_id = 0;
        let mut features = Vec::new();
        // Plenty of well-spread candidates, one per 16 px cell.
        let mut candidates = Vec::new();
        for gy in 0..4 {
            for gx in 0..6 {
                candidates.push((
                    Vector2::new(18.0 + 16.0 * gx as f64, 18.0 + 16.0 * gy as f64),
                    1.0 + (gx + gy) as f64,
                ));
            }
        }
        let spawned =
            replenish_features(&mut features, &candidates, &pyramid, 0, &mut next_id, &config)
                .unwrap();
        assert_eq!(spawned, config.max_features);
        // Cells are unique among live tracks.
        let cells: HashSet<(usize, usize)> = features
            .iter()
            .map(|f| {
                let p = f.position();
                ((p.x as usize) / 16, (p.y as usize) / 16)
            })
            .collect();
        assert_eq!(cells.len(), features.len());
        // At budget: nothing more spawns.
        let again =
            replenish_features(&mut features, &candidates, &pyramid, 0, &mut next_id, &config)
                .unwrap();
        assert_eq!(again, 0);
    }

    #[test]
    fn replenish_skips_occupied_cells() {
        let image = render(128, 96, Vector2::zeros());
        let mut config = cfg();
        config.grid_cell_size = 16;
        let pyramid = build_pyramid(&image, config.pyramid_levels).unwrap();
        let mut features = vec![
            TrackedFeature::spawn(900, 0, Vector2::new(40.0, 40.0), &pyramid, &config).unwrap(),
        ];
        let mut next_id = 901;
        // All candidates inside the occupied cell (32..48)^2.
        let candidates = vec![
            (Vector2::new(34.0, 35.0), 3.0),
            (Vector2::new(44.0, 42.0), 2.0),
            (Vector2::new(39.0, 46.0), 1.0),
        ];
        let spawned =
            replenish_features(&mut features, &candidates, &pyramid, 0, &mut next_id, &config)
                .unwrap();
        assert_eq!(spawned, 0);
        assert_eq!(features.len(), 1);
    }

    #[test]
    fn tracks_csv_has_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.csv");
        let mut a = FeatureTrack::new(3, 0, Vector2::new(1.5, 2.5));
        a.push_observation(1, Vector2::new(2.0, 3.0)).unwrap();
        let mut b = FeatureTrack::new(7, 1, Vector2::new(10.0, 20.0));
        b.cull();
        write_tracks_csv(&path, [&a, &b]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame,track_id,x,y,length,status");
        assert_eq!(lines[1], "0,3,1.5,2.5,1,alive");
        assert_eq!(lines[2], "1,3,2,3,2,alive");
        assert_eq!(lines[3], "1,7,10,20,1,culled");
        // Duplicate or rewound frames are rejected.
        assert!(a.push_observation(1, Vector2::zeros()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Accepted Gauss-Newton steps never increase the dissimilarity, so
        /// the result is at most the dissimilarity of the starting warp.
        #[test]
        fn alignment_never_worsens_dissimilarity(
            dx in -2.0f64..2.0,
            dy in -2.0f64..2.0,
            sx in -1.5f64..1.5,
            sy in -1.5f64..1.5,
        ) {
            let reference = render(96, 96, Vector2::zeros());
            let target = render(96, 96, Vector2::new(sx, sy));
            let patch = Patch::extract(&reference, Vector2::new(47.0, 45.0), 5).unwrap();
            let initial = WarpSe2::translation(Vector2::new(dx, dy));
            let (r0, _) = radiometric_residual(&patch, &target, &initial).unwrap();
            let start = mean_squared(&r0);
            let result = align_patch(&patch, &target, initial, 30, &cfg()).unwrap();
            prop_assert!(result.dissimilarity <= start + 1e-15);
        }
    }
}
