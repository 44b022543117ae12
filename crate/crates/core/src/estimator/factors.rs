//! Residuals and analytic Jacobians for the window factors.
//!
//! Error-state conventions, shared by every factor and by the solver:
//! each frame contributes 15 error dimensions ordered
//! `[dp (world), dv (world), dtheta (body-right), dba, dbg]`, with
//! orientation perturbed on the right, `R' = R Exp(dtheta)`; each
//! landmark contributes 3 (world position). Residual Jacobians are exact
//! first-order derivatives under these perturbations.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};

use super::EstimatorError;
use crate::camera::CameraModel;
use crate::imu::{imu_residual, FrameState, PreintegratedDelta, Vec15};

/// Per-frame error-state block offsets.
pub(crate) const DP: usize = 0;
pub(crate) const DV: usize = 3;
pub(crate) const DTHETA: usize = 6;
pub(crate) const DBA: usize = 9;
pub(crate) const DBG: usize = 12;
/// Error dimensions of one frame.
pub(crate) const FRAME_DIM: usize = 15;

/// Reprojection residual `observed - project(l)` and its Jacobians.
#[derive(Debug, Clone)]
pub struct ReprojectionFactor {
    pub residual: Vector2<f64>,
    /// d(residual)/d(frame position).
    pub j_position: Matrix2x3<f64>,
    /// d(residual)/d(frame attitude), right perturbation.
    pub j_attitude: Matrix2x3<f64>,
    /// d(residual)/d(landmark position).
    pub j_landmark: Matrix2x3<f64>,
}

/// Evaluates one thermal reprojection factor: the landmark is carried
/// world -> body -> camera and through the pinhole; the residual is the
/// observation minus that projection.
pub fn reprojection_residual(
    state: &FrameState,
    landmark: Vector3<f64>,
    observation: Vector2<f64>,
    camera: &CameraModel,
) -> Result<ReprojectionFactor, EstimatorError> {
    let r_wb = state.orientation;
    let p_body = r_wb.inverse() * (landmark - state.position);
    let r_cb = camera.body_to_camera.rotation.to_rotation_matrix();
    let p_cam = camera.body_to_camera * nalgebra::Point3::from(p_body);
    if p_cam.z < crate::camera::MIN_PROJECTION_DEPTH {
        return Err(EstimatorError::CheiralityViolation { depth: p_cam.z });
    }
    let projected = Vector2::new(
        camera.fx * p_cam.x / p_cam.z + camera.cx,
        camera.fy * p_cam.y / p_cam.z + camera.cy,
    );

    // d(pixel)/d(camera point), then chain: residual = obs - pixel.
    let inv_z = 1.0 / p_cam.z;
    let j_pixel_cam = Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * p_cam.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * p_cam.y * inv_z * inv_z,
    );
    let j_res_body = -j_pixel_cam * r_cb.matrix();
    let r_bw = r_wb.inverse().to_rotation_matrix();
    Ok(ReprojectionFactor {
        residual: observation - projected,
        j_position: j_res_body * (-r_bw.matrix()),
        j_attitude: j_res_body * p_body.cross_matrix(),
        j_landmark: j_res_body * r_bw.matrix(),
    })
}

/// IMU residual between consecutive frames plus its 15x15 Jacobians with
/// respect to both frames' error states.
///
/// The bias sensitivities of the preintegrated increments are taken from
/// the first-order bias Jacobians carried by the delta, so the Jacobians
/// are exact at the delta's linearization biases and first-order nearby.
#[derive(Debug, Clone)]
pub struct ImuFactor {
    pub residual: Vec15,
    pub j_first: SMatrix<f64, 15, 15>,
    pub j_second: SMatrix<f64, 15, 15>,
}

pub fn imu_factor(
    first: &FrameState,
    second: &FrameState,
    delta: &PreintegratedDelta,
) -> ImuFactor {
    let gravity = delta.noise().gravity_vector();
    let residual = imu_residual(first, second, delta, gravity);
    let (alpha, beta, gamma) = delta.bias_corrected(first.bias_accel, first.bias_gyro);
    let dt = delta.duration();
    let r_bw = first.orientation.inverse().to_rotation_matrix();
    let r_gamma = gamma.to_rotation_matrix();

    let q_err = first.orientation.inverse() * second.orientation * gamma.inverse();
    let sign = if q_err.w >= 0.0 { 1.0 } else { -1.0 };
    let w_err = q_err.w;
    let v_err = q_err.imag();
    // d(2 vec(q_err x (1, u/2)))/du and the mirrored left-composition.
    let d_right = sign * (Matrix3::identity() * w_err + v_err.cross_matrix());
    let d_left = sign * (-Matrix3::identity() * w_err + v_err.cross_matrix());

    let mut j_first = SMatrix::<f64, 15, 15>::zeros();
    let mut j_second = SMatrix::<f64, 15, 15>::zeros();

    let r_p = residual.fixed_rows::<3>(0).into_owned();
    let r_v = residual.fixed_rows::<3>(3).into_owned();

    // Position rows.
    j_first.fixed_view_mut::<3, 3>(0, DP).copy_from(&(-r_bw.matrix()));
    j_first.fixed_view_mut::<3, 3>(0, DV).copy_from(&(-r_bw.matrix() * dt));
    j_first
        .fixed_view_mut::<3, 3>(0, DTHETA)
        .copy_from(&(r_p + alpha).cross_matrix());
    j_first
        .fixed_view_mut::<3, 3>(0, DBA)
        .copy_from(&(-delta.jacobian_alpha_bias_accel()));
    j_first
        .fixed_view_mut::<3, 3>(0, DBG)
        .copy_from(&(-delta.jacobian_alpha_bias_gyro()));
    j_second.fixed_view_mut::<3, 3>(0, DP).copy_from(r_bw.matrix());

    // Velocity rows.
    j_first.fixed_view_mut::<3, 3>(3, DV).copy_from(&(-r_bw.matrix()));
    j_first
        .fixed_view_mut::<3, 3>(3, DTHETA)
        .copy_from(&(r_v + beta).cross_matrix());
    j_first
        .fixed_view_mut::<3, 3>(3, DBA)
        .copy_from(&(-delta.jacobian_beta_bias_accel()));
    j_first
        .fixed_view_mut::<3, 3>(3, DBG)
        .copy_from(&(-delta.jacobian_beta_bias_gyro()));
    j_second.fixed_view_mut::<3, 3>(3, DV).copy_from(r_bw.matrix());

    // Rotation rows.
    j_first.fixed_view_mut::<3, 3>(6, DTHETA).copy_from(&d_left);
    j_first
        .fixed_view_mut::<3, 3>(6, DBG)
        .copy_from(&(-d_right * r_gamma.matrix() * delta.jacobian_gamma_bias_gyro()));
    j_second
        .fixed_view_mut::<3, 3>(6, DTHETA)
        .copy_from(&(d_right * r_gamma.matrix()));

    // Bias random-walk rows.
    let identity = Matrix3::identity();
    j_first.fixed_view_mut::<3, 3>(9, DBA).copy_from(&(-identity));
    j_second.fixed_view_mut::<3, 3>(9, DBA).copy_from(&identity);
    j_first.fixed_view_mut::<3, 3>(12, DBG).copy_from(&(-identity));
    j_second.fixed_view_mut::<3, 3>(12, DBG).copy_from(&identity);

    ImuFactor { residual, j_first, j_second }
}

/// Applies one error-state increment to a frame (boxplus).
pub(crate) fn apply_increment(state: &FrameState, delta: &[f64]) -> FrameState {
    debug_assert_eq!(delta.len(), FRAME_DIM);
    let take = |offset: usize| Vector3::new(delta[offset], delta[offset + 1], delta[offset + 2]);
    FrameState {
        position: state.position + take(DP),
        velocity: state.velocity + take(DV),
        orientation: state.orientation
            * nalgebra::UnitQuaternion::from_scaled_axis(take(DTHETA)),
        bias_accel: state.bias_accel + take(DBA),
        bias_gyro: state.bias_gyro + take(DBG),
        timestamp: state.timestamp,
    }
}

/// Error-state difference of two frames (boxminus), the inverse of
/// [`apply_increment`] to first order: `current (-) reference`.
pub(crate) fn state_difference(current: &FrameState, reference: &FrameState) -> [f64; FRAME_DIM] {
    let mut out = [0.0; FRAME_DIM];
    let put = |out: &mut [f64; FRAME_DIM], offset: usize, v: Vector3<f64>| {
        out[offset] = v.x;
        out[offset + 1] = v.y;
        out[offset + 2] = v.z;
    };
    put(&mut out, DP, current.position - reference.position);
    put(&mut out, DV, current.velocity - reference.velocity);
    put(
        &mut out,
        DTHETA,
        (reference.orientation.inverse() * current.orientation).scaled_axis(),
    );
    put(&mut out, DBA, current.bias_accel - reference.bias_accel);
    put(&mut out, DBG, current.bias_gyro - reference.bias_gyro);
    out
}
