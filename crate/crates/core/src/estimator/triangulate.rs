//! Multi-view linear triangulation with acceptance gates.

use nalgebra::{DMatrix, Isometry3, Point3, Vector2, Vector3};

use super::EstimatorError;
use crate::camera::{CameraModel, MIN_PROJECTION_DEPTH};
use crate::imu::FrameState;

/// Acceptance gates applied before a landmark enters the optimization.
#[derive(Debug, Clone, Copy)]
pub struct TriangulationGates {
    /// Smallest pairwise ray angle that counts as usable parallax, radians.
    pub min_parallax_rad: f64,
    /// Largest tolerated reprojection error in any view, pixels.
    pub max_reprojection_px: f64,
}

impl Default for TriangulationGates {
    fn default() -> Self {
        Self {
            min_parallax_rad: 1.0_f64.to_radians(),
            max_reprojection_px: 4.5,
        }
    }
}

fn body_pose(state: &FrameState) -> Isometry3<f64> {
    Isometry3::from_parts(state.position.into(), state.orientation)
}

/// Triangulates a world point from pixel observations in two or more
/// frames via the direct linear transform, then rejects it unless every
/// gate holds: enough observations, enough pairwise parallax, positive
/// depth in every view, and small reprojection error in every view.
pub fn triangulate(
    views: &[(FrameState, Vector2<f64>)],
    camera: &CameraModel,
    gates: &TriangulationGates,
) -> Result<Vector3<f64>, EstimatorError> {
    if views.len() < 2 {
        return Err(EstimatorError::TooFewObservations { got: views.len() });
    }

    // Parallax gate on the observation rays, expressed in world axes.
    let rays: Vec<Vector3<f64>> = views
        .iter()
        .map(|(state, pixel)| {
            let t_wc = camera.camera_to_world(&body_pose(state));
            (t_wc.rotation * camera.unproject(*pixel)).normalize()
        })
        .collect();
    let mut max_parallax = 0.0_f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            max_parallax = max_parallax.max(rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos());
        }
    }
    if max_parallax < gates.min_parallax_rad {
        return Err(EstimatorError::InsufficientParallax { parallax_rad: max_parallax });
    }

    // DLT: each view contributes two rows of A x = 0 built from
    // P = K [R_cw | t_cw], with x the homogeneous world point.
    let k = camera.intrinsic_matrix();
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (row, (state, pixel)) in views.iter().enumerate() {
        let t_cw = camera.world_to_camera(&body_pose(state));
        let mut p = DMatrix::<f64>::zeros(3, 4);
        p.view_mut((0, 0), (3, 3))
            .copy_from(&(k * t_cw.rotation.to_rotation_matrix().matrix()));
        p.view_mut((0, 3), (3, 1)).copy_from(&(k * t_cw.translation.vector));
        let p0 = p.row(0).into_owned();
        let p1 = p.row(1).into_owned();
        let p2 = p.row(2).into_owned();
        a.row_mut(2 * row).copy_from(&(p2.clone() * pixel.x - p0));
        a.row_mut(2 * row + 1).copy_from(&(p2 * pixel.y - p1));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let null = v_t.row(v_t.nrows() - 1);
    if null[3].abs() < 1e-12 {
        return Err(EstimatorError::DegenerateGeometry);
    }
    let point = Vector3::new(null[0], null[1], null[2]) / null[3];
    if !point.iter().all(|v| v.is_finite()) {
        return Err(EstimatorError::DegenerateGeometry);
    }

    // Cheirality and reprojection gates in every view.
    for (state, pixel) in views {
        let p_cam = camera.world_to_camera(&body_pose(state)) * Point3::from(point);
        if p_cam.z < MIN_PROJECTION_DEPTH {
            return Err(EstimatorError::NegativeDepth { depth: p_cam.z });
        }
        let reprojected = camera.project(&p_cam.coords).expect("depth already checked");
        let error = (reprojected - pixel).norm();
        if error > gates.max_reprojection_px {
            return Err(EstimatorError::HighResidual { error_px: error });
        }
    }
    Ok(point)
}
