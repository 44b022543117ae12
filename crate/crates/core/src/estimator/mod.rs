//! Sliding-window visual-inertial estimator.
//!
//! A fixed-size window of keyframes carries navigation states, the
//! preintegrated IMU increments between consecutive frames, and the world
//! landmarks observed by the window. [`SlidingWindow::solve`] runs damped
//! Gauss-Newton over reprojection factors (Huber-robust), IMU factors,
//! the gauge anchor, and the marginal prior;
//! [`SlidingWindow::marginalize_oldest`] folds the oldest frame and its
//! exclusive landmarks into a dense prior so the window stays bounded.

mod factors;
mod init;
mod marginalize;
mod triangulate;

pub use factors::{imu_factor, reprojection_residual, ImuFactor, ReprojectionFactor};
pub use init::{
    initialize, select_keyframe, KeyframePolicy, GRAVITY_NORM_TOLERANCE, MIN_INIT_SAMPLES,
    STATIONARY_ACCEL_VARIANCE,
};
pub use marginalize::{schur_marginalize, MarginalPrior};
pub use triangulate::{triangulate, TriangulationGates};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector2, Vector3};

use crate::camera::CameraModel;
use crate::imu::{imu_residual, FrameState, ImuError, Mat15, PreintegratedDelta};
use factors::{apply_increment, DBA, DBG, DP, DTHETA, DV, FRAME_DIM};

/// Standard deviation of the gauge anchor pseudo-measurements, shared by
/// position (meters) and yaw (radians).
pub const ANCHOR_SIGMA: f64 = 1e-6;
/// Standard deviation of the initial accelerometer-bias prior, m/s^2.
pub const BIAS_PRIOR_SIGMA_ACCEL: f64 = 0.1;
/// Standard deviation of the initial gyro-bias prior, rad/s.
pub const BIAS_PRIOR_SIGMA_GYRO: f64 = 0.01;
/// Error-state dimensions of one landmark.
const LANDMARK_DIM: usize = 3;
/// Damping escalations attempted per linearization before giving up.
const MAX_DAMPING_RETRIES: usize = 32;
const MAX_LAMBDA: f64 = 1e16;
const MIN_LAMBDA: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
    #[error("point at depth {depth} is behind the camera")]
    CheiralityViolation { depth: f64 },
    #[error("{got} observations; triangulation needs at least 2")]
    TooFewObservations { got: usize },
    #[error("largest ray parallax {parallax_rad} rad is below the gate")]
    InsufficientParallax { parallax_rad: f64 },
    #[error("triangulated depth {depth} is not positive in every view")]
    NegativeDepth { depth: f64 },
    #[error("reprojection error {error_px} px exceeds the gate")]
    HighResidual { error_px: f64 },
    #[error("triangulation geometry is degenerate")]
    DegenerateGeometry,
    #[error("imu is not stationary: summed accel variance {accel_variance}")]
    NotStationary { accel_variance: f64 },
    #[error("mean specific force {measured} m/s^2 is far from gravity {expected}")]
    GravityMagnitude { measured: f64, expected: f64 },
    #[error("{got} imu samples; initialization needs {needed}")]
    TooFewSamples { got: usize, needed: usize },
    #[error("window holds {got} frames; the operation needs {needed}")]
    TooFewFrames { got: usize, needed: usize },
    #[error("frame {frame_id} is not in the window")]
    UnknownFrame { frame_id: u64 },
    #[error("frame {frame_id} is already in the window")]
    DuplicateFrame { frame_id: u64 },
    #[error("the first frame takes no imu delta; every later frame requires one")]
    DeltaMismatch,
    #[error("cost became non-finite at iteration {iteration}; states rolled back")]
    NonFiniteCost { iteration: usize },
    #[error("damped normal equations unsolvable at lambda {lambda}")]
    LinearSolveFailed { lambda: f64 },
    #[error(transparent)]
    Imu(#[from] ImuError),
}

/// Solver and window-management parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Keyframes kept in the window before marginalization.
    pub window_size: usize,
    /// Most accepted Gauss-Newton steps per solve.
    pub max_iterations: usize,
    /// Initial Levenberg-Marquardt damping factor.
    pub damping_initial: f64,
    /// Multiplier applied to the damping on rejected steps.
    pub damping_scale: f64,
    /// Huber threshold on the whitened reprojection norm, in sigmas.
    pub huber_threshold_sigma: f64,
    /// Reprojection measurement noise, pixels.
    pub reprojection_sigma_px: f64,
    /// Cost decrease below which the solve is declared converged.
    pub cost_tolerance: f64,
    /// Eliminate landmarks by Schur complement instead of solving densely.
    pub use_schur: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            max_iterations: 20,
            damping_initial: 1e-4,
            damping_scale: 10.0,
            huber_threshold_sigma: 2.5,
            reprojection_sigma_px: 1.5,
            cost_tolerance: 1e-9,
            use_schur: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let fail = |reason: &str| Err(EstimatorError::Config { reason: reason.to_string() });
        if self.window_size < 4 {
            return fail("window_size must be at least 4");
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive");
        }
        if !(self.damping_initial > 0.0) {
            return fail("damping_initial must be positive");
        }
        if !(self.damping_scale > 1.0) {
            return fail("damping_scale must exceed 1");
        }
        if !(self.huber_threshold_sigma > 0.0) {
            return fail("huber_threshold_sigma must be positive");
        }
        if !(self.reprojection_sigma_px > 0.0) {
            return fail("reprojection_sigma_px must be positive");
        }
        if !(self.cost_tolerance >= 0.0) {
            return fail("cost_tolerance must be non-negative");
        }
        Ok(())
    }

    /// Triangulation gates implied by the reprojection noise.
    pub fn triangulation_gates(&self) -> TriangulationGates {
        TriangulationGates {
            max_reprojection_px: 3.0 * self.reprojection_sigma_px,
            ..TriangulationGates::default()
        }
    }
}

/// Outcome of one window solve.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkStatus {
    /// Position is valid and the landmark participates in the solve.
    Triangulated,
    /// Observed but not yet (or no longer) reliably triangulated.
    Pending,
}

/// One world landmark and its pixel observations, keyed by frame id.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub status: LandmarkStatus,
    pub observations: Vec<(u64, Vector2<f64>)>,
}

impl Landmark {
    pub fn observation_for(&self, frame_id: u64) -> Option<Vector2<f64>> {
        self.observations.iter().find(|(f, _)| *f == frame_id).map(|(_, px)| *px)
    }
}

/// Gauge fixture on the first frame: pins position and yaw (the four
/// directions vision and inertia cannot observe) hard, and holds the IMU
/// biases near their initial estimates weakly. Without the bias hold, a
/// tilt of the whole scene about a horizontal axis traded against an
/// accelerometer-bias shift of `g x theta` costs nothing to first order.
#[derive(Debug, Clone)]
pub(crate) struct GaugeAnchor {
    pub(crate) frame_id: u64,
    pub(crate) position: Vector3<f64>,
    pub(crate) orientation: UnitQuaternion<f64>,
    /// World z expressed in the anchor body frame; frozen at creation.
    pub(crate) axis_body: Vector3<f64>,
    pub(crate) bias_accel: Vector3<f64>,
    pub(crate) bias_gyro: Vector3<f64>,
}

impl GaugeAnchor {
    fn new(frame_id: u64, state: &FrameState) -> Self {
        Self {
            frame_id,
            position: state.position,
            orientation: state.orientation,
            axis_body: state.orientation.inverse() * Vector3::z(),
            bias_accel: state.bias_accel,
            bias_gyro: state.bias_gyro,
        }
    }

    /// Raw (unwhitened) anchor discrepancies: position offset and the yaw
    /// component of the attitude offset.
    fn discrepancy(&self, state: &FrameState) -> (Vector3<f64>, f64) {
        let dp = state.position - self.position;
        let log = (self.orientation.inverse() * state.orientation).scaled_axis();
        (dp, self.axis_body.dot(&log))
    }
}

/// The sliding window itself: frames oldest-first, one preintegrated IMU
/// delta per consecutive pair, landmarks, and the dense prior left behind
/// by marginalization.
#[derive(Debug, Clone, Default)]
pub struct SlidingWindow {
    pub(crate) frames: Vec<(u64, FrameState)>,
    pub(crate) deltas: Vec<PreintegratedDelta>,
    pub(crate) landmarks: BTreeMap<u64, Landmark>,
    pub(crate) prior: Option<MarginalPrior>,
    pub(crate) anchor: Option<GaugeAnchor>,
}

/// Column layout of one linearized window: frames first (15 columns each,
/// window order), then triangulated landmarks (3 columns each, id order).
pub(crate) struct Layout {
    pub(crate) frame_ids: Vec<u64>,
    pub(crate) landmark_ids: Vec<u64>,
}

impl Layout {
    fn of_window(window: &SlidingWindow) -> Self {
        Self {
            frame_ids: window.frames.iter().map(|(id, _)| *id).collect(),
            landmark_ids: window
                .landmarks
                .values()
                .filter(|l| l.status == LandmarkStatus::Triangulated)
                .map(|l| l.id)
                .collect(),
        }
    }

    pub(crate) fn pose_dim(&self) -> usize {
        FRAME_DIM * self.frame_ids.len()
    }

    pub(crate) fn dim(&self) -> usize {
        self.pose_dim() + LANDMARK_DIM * self.landmark_ids.len()
    }

    pub(crate) fn frame_col(&self, frame_id: u64) -> Option<usize> {
        self.frame_ids.iter().position(|id| *id == frame_id).map(|i| FRAME_DIM * i)
    }

    fn landmark_col(&self, landmark_id: u64) -> Option<usize> {
        self.landmark_ids
            .iter()
            .position(|id| *id == landmark_id)
            .map(|i| self.pose_dim() + LANDMARK_DIM * i)
    }
}

/// Huber cost and IRLS weight for a whitened residual norm `u`, threshold
/// `k`: quadratic inside, linear outside.
fn huber(u: f64, k: f64) -> (f64, f64) {
    if u <= k {
        (u * u, 1.0)
    } else {
        (2.0 * k * u - k * k, k / u)
    }
}

/// Accumulates one IMU factor into the normal equations.
pub(crate) fn scatter_imu(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    factor: &ImuFactor,
    weight: &Mat15,
    col_i: usize,
    col_j: usize,
) {
    let jw_i = factor.j_first.transpose() * weight;
    let jw_j = factor.j_second.transpose() * weight;
    let mut block = h.fixed_view_mut::<15, 15>(col_i, col_i);
    block += jw_i * factor.j_first;
    let mut block = h.fixed_view_mut::<15, 15>(col_i, col_j);
    block += jw_i * factor.j_second;
    let mut block = h.fixed_view_mut::<15, 15>(col_j, col_i);
    block += jw_j * factor.j_first;
    let mut block = h.fixed_view_mut::<15, 15>(col_j, col_j);
    block += jw_j * factor.j_second;
    let mut seg = b.fixed_rows_mut::<15>(col_i);
    seg -= jw_i * factor.residual;
    let mut seg = b.fixed_rows_mut::<15>(col_j);
    seg -= jw_j * factor.residual;
}

/// Accumulates one reprojection factor (already Huber-weighted via
/// `weight`, which carries the IRLS weight over sigma squared).
pub(crate) fn scatter_reprojection(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    factor: &ReprojectionFactor,
    weight: f64,
    col_frame: usize,
    col_landmark: usize,
) {
    let blocks = [
        (col_frame + DP, factor.j_position),
        (col_frame + DTHETA, factor.j_attitude),
        (col_landmark, factor.j_landmark),
    ];
    for (col_a, j_a) in blocks {
        for (col_b, j_b) in blocks {
            let mut block = h.fixed_view_mut::<3, 3>(col_a, col_b);
            block += j_a.transpose() * j_b * weight;
        }
        let mut seg = b.fixed_rows_mut::<3>(col_a);
        seg -= j_a.transpose() * factor.residual * weight;
    }
}

/// Accumulates the gauge anchor pseudo-measurements on one frame.
pub(crate) fn scatter_anchor(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    anchor: &GaugeAnchor,
    state: &FrameState,
    col: usize,
) {
    let w = ANCHOR_SIGMA.powi(-2);
    let (dp, yaw) = anchor.discrepancy(state);
    for i in 0..3 {
        h[(col + DP + i, col + DP + i)] += w;
        b[col + DP + i] -= w * dp[i];
    }
    let d = anchor.axis_body;
    let mut block = h.fixed_view_mut::<3, 3>(col + DTHETA, col + DTHETA);
    block += d * d.transpose() * w;
    let mut seg = b.fixed_rows_mut::<3>(col + DTHETA);
    seg -= d * (w * yaw);
    let w_ba = BIAS_PRIOR_SIGMA_ACCEL.powi(-2);
    let w_bg = BIAS_PRIOR_SIGMA_GYRO.powi(-2);
    for i in 0..3 {
        h[(col + DBA + i, col + DBA + i)] += w_ba;
        b[col + DBA + i] -= w_ba * (state.bias_accel[i] - anchor.bias_accel[i]);
        h[(col + DBG + i, col + DBG + i)] += w_bg;
        b[col + DBG + i] -= w_bg * (state.bias_gyro[i] - anchor.bias_gyro[i]);
    }
}

/// Accumulates the marginal prior. `residual` must be the prior residual
/// at the current states; `col_of_frame` maps frame ids to column starts.
pub(crate) fn scatter_prior(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    prior: &MarginalPrior,
    residual: &DVector<f64>,
    col_of_frame: impl Fn(u64) -> Option<usize>,
) -> Result<(), EstimatorError> {
    let rows = prior.jacobian.nrows();
    let mut widened = DMatrix::<f64>::zeros(rows, h.nrows());
    for (chunk, (frame_id, _)) in prior.linearization.iter().enumerate() {
        let col = col_of_frame(*frame_id)
            .ok_or(EstimatorError::UnknownFrame { frame_id: *frame_id })?;
        widened
            .view_mut((0, col), (rows, FRAME_DIM))
            .copy_from(&prior.jacobian.view((0, chunk * FRAME_DIM), (rows, FRAME_DIM)));
    }
    let transposed = widened.transpose();
    *h += &transposed * widened;
    *b -= transposed * residual;
    Ok(())
}

/// Solves the damped normal equations, either densely or by eliminating
/// the landmark block first. Both paths damp the same way and agree up to
/// rounding. `None` when the damped system is not positive definite.
fn solve_damped(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    pose_dim: usize,
    use_schur: bool,
) -> Option<DVector<f64>> {
    let dim = h.nrows();
    let mut damped = h.clone();
    for i in 0..dim {
        let scale = damped[(i, i)].max(1e-12);
        damped[(i, i)] += lambda * scale;
    }
    let land_dim = dim - pose_dim;
    if !use_schur || land_dim == 0 {
        return nalgebra::Cholesky::new(damped).map(|c| c.solve(b));
    }

    // The landmark block is 3x3 block diagonal: no factor couples two
    // landmarks directly, so it inverts blockwise.
    let mut hll_inv = DMatrix::<f64>::zeros(land_dim, land_dim);
    for k in 0..land_dim / LANDMARK_DIM {
        let at = pose_dim + LANDMARK_DIM * k;
        let block = damped.fixed_view::<3, 3>(at, at).into_owned();
        let chol = nalgebra::Cholesky::new(block)?;
        hll_inv
            .fixed_view_mut::<3, 3>(LANDMARK_DIM * k, LANDMARK_DIM * k)
            .copy_from(&chol.inverse());
    }
    let hff = damped.view((0, 0), (pose_dim, pose_dim)).into_owned();
    let hfl = damped.view((0, pose_dim), (pose_dim, land_dim)).into_owned();
    let bf = b.rows(0, pose_dim).into_owned();
    let bl = b.rows(pose_dim, land_dim).into_owned();
    let hfl_hll_inv = &hfl * &hll_inv;
    let reduced_h = hff - &hfl_hll_inv * hfl.transpose();
    let reduced_b = bf - &hfl_hll_inv * &bl;
    let pose_step = nalgebra::Cholesky::new(reduced_h)?.solve(&reduced_b);
    let landmark_step = hll_inv * (bl - hfl.transpose() * &pose_step);
    let mut step = DVector::zeros(dim);
    step.rows_mut(0, pose_dim).copy_from(&pose_step);
    step.rows_mut(pose_dim, land_dim).copy_from(&landmark_step);
    Some(step)
}

struct Snapshot {
    frames: Vec<(u64, FrameState)>,
    landmarks: Vec<(u64, Vector3<f64>)>,
}

impl SlidingWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a keyframe. The first frame ever pushed becomes the gauge
    /// anchor and takes no IMU delta; every later frame requires the
    /// preintegrated delta from its predecessor.
    pub fn push_frame(
        &mut self,
        frame_id: u64,
        state: FrameState,
        delta: Option<PreintegratedDelta>,
    ) -> Result<(), EstimatorError> {
        if self.frames.iter().any(|(id, _)| *id == frame_id) {
            return Err(EstimatorError::DuplicateFrame { frame_id });
        }
        if self.frames.is_empty() {
            if delta.is_some() {
                return Err(EstimatorError::DeltaMismatch);
            }
            if self.prior.is_none() && self.anchor.is_none() {
                self.anchor = Some(GaugeAnchor::new(frame_id, &state));
            }
        } else {
            self.deltas.push(delta.ok_or(EstimatorError::DeltaMismatch)?);
        }
        self.frames.push((frame_id, state));
        Ok(())
    }

    pub fn frames(&self) -> &[(u64, FrameState)] {
        &self.frames
    }

    pub fn frame_state(&self, frame_id: u64) -> Option<&FrameState> {
        self.frames.iter().find(|(id, _)| *id == frame_id).map(|(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.values()
    }

    pub fn landmark(&self, landmark_id: u64) -> Option<&Landmark> {
        self.landmarks.get(&landmark_id)
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    pub fn is_anchored(&self) -> bool {
        self.anchor.is_some()
    }

    /// Installs a whitened prior capturing what static initialization
    /// measured about one frame: the gravity-referenced tilt (the two
    /// attitude directions orthogonal to the yaw axis) and the velocity,
    /// linearized at the frame's current state.
    ///
    /// Without it the window keeps an exactly flat direction — a global
    /// tilt of every orientation with the matching velocity drift leaves
    /// all inertial residuals unchanged, and free landmarks follow — so
    /// long sliding runs wander in roll/pitch. Only valid while no
    /// marginalization prior exists; marginalization then carries the
    /// information forward like any other absorbed factor.
    pub fn set_initial_prior(
        &mut self,
        frame_id: u64,
        sigma_tilt_rad: f64,
        sigma_velocity: f64,
    ) -> Result<(), EstimatorError> {
        if !(sigma_tilt_rad > 0.0) || !(sigma_velocity > 0.0) {
            return Err(EstimatorError::Config {
                reason: "initial prior sigmas must be positive".into(),
            });
        }
        if self.prior.is_some() {
            return Err(EstimatorError::Config {
                reason: "initial prior must precede any marginalization".into(),
            });
        }
        let state = *self
            .frame_state(frame_id)
            .ok_or(EstimatorError::UnknownFrame { frame_id })?;
        // Yaw axis expressed in the body frame; tilt perturbations live in
        // its orthogonal plane.
        let yaw_axis = state.orientation.inverse() * Vector3::z();
        let seed = if yaw_axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let tilt_u = yaw_axis.cross(&seed).normalize();
        let tilt_v = yaw_axis.cross(&tilt_u);
        let mut jacobian = DMatrix::<f64>::zeros(5, FRAME_DIM);
        for i in 0..3 {
            jacobian[(0, DTHETA + i)] = tilt_u[i] / sigma_tilt_rad;
            jacobian[(1, DTHETA + i)] = tilt_v[i] / sigma_tilt_rad;
            jacobian[(2 + i, DV + i)] = 1.0 / sigma_velocity;
        }
        self.prior = Some(MarginalPrior {
            jacobian,
            offset: DVector::zeros(5),
            linearization: vec![(frame_id, state)],
        });
        Ok(())
    }

    /// Records a pixel observation, creating a pending landmark when the
    /// id is new. A repeated (landmark, frame) pair replaces the pixel.
    pub fn observe(
        &mut self,
        landmark_id: u64,
        frame_id: u64,
        pixel: Vector2<f64>,
    ) -> Result<(), EstimatorError> {
        if self.frame_state(frame_id).is_none() {
            return Err(EstimatorError::UnknownFrame { frame_id });
        }
        let landmark = self.landmarks.entry(landmark_id).or_insert_with(|| Landmark {
            id: landmark_id,
            position: Vector3::zeros(),
            status: LandmarkStatus::Pending,
            observations: Vec::new(),
        });
        match landmark.observations.iter_mut().find(|(f, _)| *f == frame_id) {
            Some(obs) => obs.1 = pixel,
            None => landmark.observations.push((frame_id, pixel)),
        }
        Ok(())
    }

    /// Attempts to triangulate every pending landmark with at least two
    /// observations; promotions return how many succeeded.
    pub fn triangulate_pending(
        &mut self,
        camera: &CameraModel,
        gates: &TriangulationGates,
    ) -> usize {
        let frames: BTreeMap<u64, FrameState> = self.frames.iter().copied().collect();
        let mut promoted = 0;
        for landmark in self.landmarks.values_mut() {
            if landmark.status == LandmarkStatus::Triangulated {
                continue;
            }
            let views: Vec<(FrameState, Vector2<f64>)> = landmark
                .observations
                .iter()
                .filter_map(|(fid, px)| frames.get(fid).map(|s| (*s, *px)))
                .collect();
            if let Ok(position) = triangulate(&views, camera, gates) {
                landmark.position = position;
                landmark.status = LandmarkStatus::Triangulated;
                promoted += 1;
            }
        }
        promoted
    }

    fn frame_index(&self, frame_id: u64) -> Option<usize> {
        self.frames.iter().position(|(id, _)| *id == frame_id)
    }

    /// Total window cost at the current states: IMU Mahalanobis terms,
    /// Huber-robust whitened reprojection terms, anchor, and prior.
    /// Reprojection factors whose landmark falls behind the camera drop
    /// out (zero weight) rather than failing the evaluation.
    pub fn cost(&self, camera: &CameraModel, config: &SolverConfig) -> Result<f64, EstimatorError> {
        let mut total = 0.0;
        if let Some(prior) = &self.prior {
            total += prior.residual(self)?.norm_squared();
        }
        if let Some(anchor) = &self.anchor {
            let state = self
                .frame_state(anchor.frame_id)
                .ok_or(EstimatorError::UnknownFrame { frame_id: anchor.frame_id })?;
            let (dp, yaw) = anchor.discrepancy(state);
            total += ANCHOR_SIGMA.powi(-2) * (dp.norm_squared() + yaw * yaw);
            total += BIAS_PRIOR_SIGMA_ACCEL.powi(-2)
                * (state.bias_accel - anchor.bias_accel).norm_squared();
            total += BIAS_PRIOR_SIGMA_GYRO.powi(-2)
                * (state.bias_gyro - anchor.bias_gyro).norm_squared();
        }
        for (k, delta) in self.deltas.iter().enumerate() {
            let residual = imu_residual(
                &self.frames[k].1,
                &self.frames[k + 1].1,
                delta,
                delta.noise().gravity_vector(),
            );
            total += residual.dot(&(delta.weight_matrix() * residual));
        }
        let sigma = config.reprojection_sigma_px;
        for landmark in self.landmarks.values() {
            if landmark.status != LandmarkStatus::Triangulated {
                continue;
            }
            for (frame_id, pixel) in &landmark.observations {
                let state = self
                    .frame_state(*frame_id)
                    .ok_or(EstimatorError::UnknownFrame { frame_id: *frame_id })?;
                match reprojection_residual(state, landmark.position, *pixel, camera) {
                    Ok(factor) => {
                        let u = factor.residual.norm() / sigma;
                        total += huber(u, config.huber_threshold_sigma).0;
                    }
                    Err(EstimatorError::CheiralityViolation { .. }) => {}
                    Err(other) => return Err(other),
                }
            }
        }
        Ok(total)
    }

    /// Builds the Gauss-Newton normal equations at the current states.
    fn assemble(
        &self,
        camera: &CameraModel,
        config: &SolverConfig,
        layout: &Layout,
    ) -> Result<(DMatrix<f64>, DVector<f64>), EstimatorError> {
        let dim = layout.dim();
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        if let Some(prior) = &self.prior {
            let residual = prior.residual(self)?;
            scatter_prior(&mut h, &mut b, prior, &residual, |id| layout.frame_col(id))?;
        }
        if let Some(anchor) = &self.anchor {
            let col = layout
                .frame_col(anchor.frame_id)
                .ok_or(EstimatorError::UnknownFrame { frame_id: anchor.frame_id })?;
            let state = self.frame_state(anchor.frame_id).expect("anchor frame exists");
            scatter_anchor(&mut h, &mut b, anchor, state, col);
        }
        for (k, delta) in self.deltas.iter().enumerate() {
            let factor = imu_factor(&self.frames[k].1, &self.frames[k + 1].1, delta);
            scatter_imu(
                &mut h,
                &mut b,
                &factor,
                &delta.weight_matrix(),
                FRAME_DIM * k,
                FRAME_DIM * (k + 1),
            );
        }
        let sigma = config.reprojection_sigma_px;
        for landmark in self.landmarks.values() {
            if landmark.status != LandmarkStatus::Triangulated {
                continue;
            }
            let Some(col_landmark) = layout.landmark_col(landmark.id) else { continue };
            for (frame_id, pixel) in &landmark.observations {
                let index = self
                    .frame_index(*frame_id)
                    .ok_or(EstimatorError::UnknownFrame { frame_id: *frame_id })?;
                let state = &self.frames[index].1;
                match reprojection_residual(state, landmark.position, *pixel, camera) {
                    Ok(factor) => {
                        let u = factor.residual.norm() / sigma;
                        let weight = huber(u, config.huber_threshold_sigma).1 / (sigma * sigma);
                        scatter_reprojection(
                            &mut h,
                            &mut b,
                            &factor,
                            weight,
                            FRAME_DIM * index,
                            col_landmark,
                        );
                    }
                    Err(EstimatorError::CheiralityViolation { .. }) => {}
                    Err(other) => return Err(other),
                }
            }
        }
        Ok((h, b))
    }

    /// Zeros the anchored frame's position increments so the translation
    /// gauge never moves, not even by rounding. Yaw is deliberately left to
    /// the anchor's soft row: roll/pitch increments compose with a
    /// second-order yaw remainder, and a hard-zeroed yaw column would let
    /// that remainder accumulate with no way to correct it.
    fn project_gauge(&self, layout: &Layout, step: &mut DVector<f64>) {
        let Some(anchor) = &self.anchor else { return };
        let Some(col) = layout.frame_col(anchor.frame_id) else { return };
        for i in 0..3 {
            step[col + DP + i] = 0.0;
        }
    }

    fn capture(&self) -> Snapshot {
        Snapshot {
            frames: self.frames.clone(),
            landmarks: self.landmarks.values().map(|l| (l.id, l.position)).collect(),
        }
    }

    fn restore(&mut self, snapshot: &Snapshot) {
        self.frames.clone_from(&snapshot.frames);
        for (id, position) in &snapshot.landmarks {
            if let Some(landmark) = self.landmarks.get_mut(id) {
                landmark.position = *position;
            }
        }
    }

    fn apply_step(&mut self, layout: &Layout, step: &DVector<f64>) {
        for (index, (_, state)) in self.frames.iter_mut().enumerate() {
            let col = FRAME_DIM * index;
            *state = apply_increment(state, &step.as_slice()[col..col + FRAME_DIM]);
        }
        for (index, id) in layout.landmark_ids.iter().enumerate() {
            let col = layout.pose_dim() + LANDMARK_DIM * index;
            let landmark = self.landmarks.get_mut(id).expect("layout landmark exists");
            landmark.position += Vector3::new(step[col], step[col + 1], step[col + 2]);
        }
    }

    /// Optimizes all window states with Levenberg-Marquardt. Accepted
    /// steps strictly decrease the cost; rejected steps escalate damping.
    /// A non-finite cost rolls every state back to the entry snapshot.
    pub fn solve(
        &mut self,
        camera: &CameraModel,
        config: &SolverConfig,
    ) -> Result<CostReport, EstimatorError> {
        config.validate()?;
        if self.frames.is_empty() {
            return Err(EstimatorError::TooFewFrames { got: 0, needed: 1 });
        }
        let layout = Layout::of_window(self);
        let snapshot = self.capture();
        let mut cost = self.cost(camera, config)?;
        if !cost.is_finite() {
            return Err(EstimatorError::NonFiniteCost { iteration: 0 });
        }
        let mut trace = vec![cost];
        if cost <= config.cost_tolerance {
            return Ok(CostReport {
                initial_cost: cost,
                final_cost: cost,
                iterations: 0,
                converged: true,
                cost_trace: trace,
            });
        }

        let mut lambda = config.damping_initial;
        let mut converged = false;
        'outer: for iteration in 0..config.max_iterations {
            let (h, b) = match self.assemble(camera, config, &layout) {
                Ok(system) => system,
                Err(error) => {
                    self.restore(&snapshot);
                    return Err(error);
                }
            };
            let mut accepted = false;
            for _ in 0..MAX_DAMPING_RETRIES {
                let Some(mut step) = solve_damped(&h, &b, lambda, layout.pose_dim(), config.use_schur)
                else {
                    lambda *= config.damping_scale;
                    if lambda > MAX_LAMBDA {
                        self.restore(&snapshot);
                        return Err(EstimatorError::LinearSolveFailed { lambda });
                    }
                    continue;
                };
                self.project_gauge(&layout, &mut step);
                let before = self.capture();
                self.apply_step(&layout, &step);
                let candidate = match self.cost(camera, config) {
                    Ok(value) => value,
                    Err(error) => {
                        self.restore(&snapshot);
                        return Err(error);
                    }
                };
                if !candidate.is_finite() {
                    self.restore(&snapshot);
                    return Err(EstimatorError::NonFiniteCost { iteration: iteration + 1 });
                }
                if candidate < cost {
                    let drop = cost - candidate;
                    cost = candidate;
                    trace.push(cost);
                    lambda = (lambda / config.damping_scale).max(MIN_LAMBDA);
                    accepted = true;
                    if drop <= config.cost_tolerance * (1.0 + cost) {
                        converged = true;
                    }
                    break;
                }
                self.restore(&before);
                lambda *= config.damping_scale;
                if lambda > MAX_LAMBDA {
                    break;
                }
            }
            if !accepted || converged {
                break 'outer;
            }
        }
        Ok(CostReport {
            initial_cost: trace[0],
            final_cost: cost,
            iterations: trace.len() - 1,
            converged,
            cost_trace: trace,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn config_validation_rejects_bad_parameters() {
        let mut config = SolverConfig::default();
        assert!(config.validate().is_ok());
        config.window_size = 3;
        assert!(matches!(config.validate(), Err(EstimatorError::Config { .. })));
        config = SolverConfig { damping_initial: 0.0, ..SolverConfig::default() };
        assert!(config.validate().is_err());
        config = SolverConfig { damping_scale: 1.0, ..SolverConfig::default() };
        assert!(config.validate().is_err());
        config = SolverConfig { reprojection_sigma_px: -1.0, ..SolverConfig::default() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn push_frame_enforces_delta_and_id_rules() {
        let (window, _, _) = constant_accel_window(2);
        let mut window = window;
        let state = truth_state(2);
        assert!(matches!(
            window.push_frame(1, state, None),
            Err(EstimatorError::DuplicateFrame { frame_id: 1 })
        ));
        assert!(matches!(
            window.push_frame(9, state, None),
            Err(EstimatorError::DeltaMismatch)
        ));
        let mut empty = SlidingWindow::new();
        let delta = PreintegratedDelta::new(
            crate::imu::ImuNoiseParams::default(),
            Vector3::zeros(),
            Vector3::zeros(),
        );
        assert!(matches!(
            empty.push_frame(0, state, Some(delta)),
            Err(EstimatorError::DeltaMismatch)
        ));
    }

    #[test]
    fn observing_an_unknown_frame_is_rejected() {
        let (mut window, _, _) = constant_accel_window(2);
        assert!(matches!(
            window.observe(500, 77, Vector2::zeros()),
            Err(EstimatorError::UnknownFrame { frame_id: 77 })
        ));
    }

    #[test]
    fn consistent_window_converges_in_zero_iterations() {
        let (mut window, _, camera) = constant_accel_window(4);
        let config = SolverConfig::default();
        let report = window.solve(&camera, &config).unwrap();
        assert!(report.initial_cost < 1e-10, "cost {}", report.initial_cost);
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
        assert_eq!(report.cost_trace.len(), 1);
    }

    #[test]
    fn perturbed_window_recovers_the_ground_truth() {
        let (mut window, truth, camera) = excited_window(4);
        perturb(&mut window, 0.01, 0.5_f64.to_radians(), 0.005);
        let config = SolverConfig::default();
        let report = window.solve(&camera, &config).unwrap();
        assert!(report.converged, "report {report:?}");
        assert!(report.final_cost < report.initial_cost);
        for pair in report.cost_trace.windows(2) {
            assert!(pair[1] < pair[0], "trace must strictly decrease: {:?}", report.cost_trace);
        }
        for (k, (_, state)) in window.frames().iter().enumerate() {
            let err_p = (state.position - truth[k].position).norm();
            let err_r = state.orientation.angle_to(&truth[k].orientation);
            let err_v = (state.velocity - truth[k].velocity).norm();
            assert!(err_p < 1e-6, "frame {k} position error {err_p}");
            assert!(err_r < 1e-7, "frame {k} rotation error {err_r}");
            assert!(err_v < 1e-6, "frame {k} velocity error {err_v}");
        }
        for (landmark, point) in window.landmarks().zip(landmark_grid()) {
            assert!((landmark.position - point).norm() < 1e-6);
        }
    }

    #[test]
    fn dense_and_schur_paths_agree() {
        let (mut schur, _, camera) = constant_accel_window(4);
        perturb(&mut schur, 0.01, 0.5_f64.to_radians(), 0.005);
        let mut dense = schur.clone();
        let config = SolverConfig::default();
        let report_schur = schur.solve(&camera, &config).unwrap();
        let report_dense = dense
            .solve(&camera, &SolverConfig { use_schur: false, ..config })
            .unwrap();
        assert!(report_schur.converged && report_dense.converged);
        for ((_, a), (_, b)) in schur.frames().iter().zip(dense.frames()) {
            assert!((a.position - b.position).norm() < 1e-8);
            assert!(a.orientation.angle_to(&b.orientation) < 1e-8);
        }
        assert!(
            (report_schur.final_cost - report_dense.final_cost).abs()
                < 1e-8 * (1.0 + report_schur.final_cost)
        );
    }

    #[test]
    fn gauge_is_pinned_exactly_to_the_anchor() {
        let (mut window, _, camera) = excited_window(4);
        perturb(&mut window, 0.01, 0.5_f64.to_radians(), 0.005);
        let anchor = window.anchor.clone().unwrap();
        let before = window.frames()[0].1;
        let report = window.solve(&camera, &SolverConfig::default()).unwrap();
        assert!(report.converged);
        let after = window.frames()[0].1;
        // Bitwise: the projection zeroes the anchored position increments.
        assert_eq!(before.position, after.position);
        let log = (anchor.orientation.inverse() * after.orientation).scaled_axis();
        assert!(anchor.axis_body.dot(&log).abs() < 1e-9);
    }

    #[test]
    fn non_finite_cost_rolls_back_and_errors() {
        let (mut window, _, camera) = constant_accel_window(4);
        perturb(&mut window, 0.01, 0.5_f64.to_radians(), 0.005);
        let landmark = window.landmarks.get_mut(&3).unwrap();
        landmark.observations[1].1 = Vector2::new(f64::NAN, 10.0);
        let before = window.clone();
        let result = window.solve(&camera, &SolverConfig::default());
        assert!(matches!(result, Err(EstimatorError::NonFiniteCost { .. })));
        for ((_, a), (_, b)) in window.frames().iter().zip(before.frames()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.orientation, b.orientation);
        }
        for (a, b) in window.landmarks().zip(before.landmarks()) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn cheirality_violations_drop_out_of_the_cost() {
        let (mut window, _, camera) = constant_accel_window(4);
        let config = SolverConfig::default();
        let baseline = window.cost(&camera, &config).unwrap();
        // Drag one landmark behind every camera: its factors vanish
        // instead of poisoning the cost.
        let landmark = window.landmarks.get_mut(&0).unwrap();
        landmark.position = Vector3::new(-5.0, 0.0, 0.0);
        let cost = window.cost(&camera, &config).unwrap();
        assert!(cost.is_finite());
        assert!(cost >= baseline || (cost - baseline).abs() < 1e-9);
    }

    #[test]
    fn pending_landmarks_are_triangulated_on_demand() {
        let (mut window, _, camera) = constant_accel_window(4);
        let point = Vector3::new(5.0, 0.9, -0.4);
        let frames = window.frames().to_vec();
        for (frame_id, state) in frames {
            let pixel = exact_pixel(&camera, &state, point);
            window.observe(900, frame_id, pixel).unwrap();
        }
        assert_eq!(window.landmark(900).unwrap().status, LandmarkStatus::Pending);
        let promoted =
            window.triangulate_pending(&camera, &SolverConfig::default().triangulation_gates());
        assert_eq!(promoted, 1);
        let landmark = window.landmark(900).unwrap();
        assert_eq!(landmark.status, LandmarkStatus::Triangulated);
        assert_relative_eq!((landmark.position - point).norm(), 0.0, epsilon = 1e-6);
    }
}
