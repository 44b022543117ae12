//! IMU preintegration between camera frames.
//!
//! A [`PreintegratedDelta`] accumulates gyro/accelerometer samples into
//! body-frame position/velocity/rotation increments (alpha, beta, gamma)
//! that are independent of the world frame: gravity is applied only in the
//! residual, never inside the delta. Alongside the increments it propagates
//! a 15x15 error-state covariance and the first-order Jacobians of the
//! increments with respect to the linearization biases, so deltas can be
//! cheaply re-linearized when bias estimates move.
//!
//! Error-state order everywhere: (dAlpha, dBeta, dTheta, dBiasAcc, dBiasGyr).
//! Quaternions are Hamilton, body-to-world.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3};

use crate::geometry::skew;

/// One inertial measurement in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Angular velocity, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s^2 (includes the reaction to gravity).
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities and the gravity convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseParams {
    /// Gyro white noise density, rad/s/sqrt(Hz).
    pub gyro_noise_density: f64,
    /// Accelerometer white noise density, m/s^2/sqrt(Hz).
    pub accel_noise_density: f64,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s^3/sqrt(Hz).
    pub accel_bias_walk: f64,
    /// Gravity magnitude, m/s^2.
    pub gravity_magnitude: f64,
}

impl Default for ImuNoiseParams {
    /// Consumer-MEMS class defaults.
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_walk: 2.0e-5,
            accel_bias_walk: 3.0e-4,
            gravity_magnitude: 9.81,
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<(), ImuError> {
        let all_ok = self.gyro_noise_density >= 0.0
            && self.accel_noise_density >= 0.0
            && self.gyro_bias_walk >= 0.0
            && self.accel_bias_walk >= 0.0
            && self.gravity_magnitude >= 0.0;
        if all_ok {
            Ok(())
        } else {
            Err(ImuError::NegativeNoise)
        }
    }

    /// The residual's gravity vector g^w. World z points up and the vector
    /// is (0, 0, +g): it is the negative of the gravitational acceleration,
    /// so a stationary accelerometer reading (0, 0, +g) cancels exactly in
    /// the residual. Body dynamics under this convention read
    /// p_ddot = R * a_body - g^w.
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity_magnitude)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ImuError {
    #[error("sample pair not forward in time: {t0} -> {t1}")]
    NonPositiveDt { t0: f64, t1: f64 },
    #[error("noise densities must be non-negative")]
    NegativeNoise,
    #[error("imu stream is empty")]
    EmptyStream,
    #[error("imu timestamps not strictly increasing at index {index}")]
    NonMonotone { index: usize },
    #[error("interval [{t0}, {t1}] not covered by imu stream [{have0}, {have1}]")]
    IntervalNotCovered { t0: f64, t1: f64, have0: f64, have1: f64 },
    #[error("interval end {t1} not after start {t0}")]
    EmptyInterval { t0: f64, t1: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: malformed imu row: {reason}")]
    BadRow { path: PathBuf, line: usize, reason: String },
}

/// Navigation state of one frame: pose, velocity, and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Body-to-world rotation.
    pub orientation: UnitQuaternion<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub timestamp: f64,
}

impl FrameState {
    pub fn stationary(timestamp: f64) -> Self {
        Self {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            timestamp,
        }
    }
}

/// Dimensions of the preintegration error state.
pub const ERROR_STATE_DIM: usize = 15;

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Vec15 = SVector<f64, 15>;

/// Body-frame increments between two camera frames, with covariance and
/// bias Jacobians, linearized at fixed bias values.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedDelta {
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    gamma: UnitQuaternion<f64>,
    duration: f64,
    lin_bias_accel: Vector3<f64>,
    lin_bias_gyro: Vector3<f64>,
    /// Error-state transition product; bias Jacobians are its right columns.
    jacobian: Mat15,
    covariance: Mat15,
    noise: ImuNoiseParams,
}

impl PreintegratedDelta {
    /// Fresh delta linearized at the given biases.
    pub fn new(noise: ImuNoiseParams, bias_accel: Vector3<f64>, bias_gyro: Vector3<f64>) -> Self {
        Self {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: UnitQuaternion::identity(),
            duration: 0.0,
            lin_bias_accel: bias_accel,
            lin_bias_gyro: bias_gyro,
            jacobian: Mat15::identity(),
            covariance: Mat15::zeros(),
            noise,
        }
    }

    pub fn alpha(&self) -> Vector3<f64> {
        self.alpha
    }

    pub fn beta(&self) -> Vector3<f64> {
        self.beta
    }

    pub fn gamma(&self) -> UnitQuaternion<f64> {
        self.gamma
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn lin_bias_accel(&self) -> Vector3<f64> {
        self.lin_bias_accel
    }

    pub fn lin_bias_gyro(&self) -> Vector3<f64> {
        self.lin_bias_gyro
    }

    pub fn covariance(&self) -> &Mat15 {
        &self.covariance
    }

    pub fn noise(&self) -> &ImuNoiseParams {
        &self.noise
    }

    pub fn jacobian_alpha_bias_accel(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(0, 9).into_owned()
    }

    pub fn jacobian_alpha_bias_gyro(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(0, 12).into_owned()
    }

    pub fn jacobian_beta_bias_accel(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(3, 9).into_owned()
    }

    pub fn jacobian_beta_bias_gyro(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(3, 12).into_owned()
    }

    pub fn jacobian_gamma_bias_gyro(&self) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(6, 12).into_owned()
    }

    /// Midpoint update with one sample pair. Gravity never enters here.
    pub fn integrate(&self, first: &ImuSample, second: &ImuSample) -> Result<Self, ImuError> {
        let dt = second.timestamp - first.timestamp;
        if dt <= 0.0 {
            return Err(ImuError::NonPositiveDt { t0: first.timestamp, t1: second.timestamp });
        }

        let gyro_mid = 0.5 * (first.gyro + second.gyro) - self.lin_bias_gyro;
        let gamma_next = self.gamma * UnitQuaternion::from_scaled_axis(gyro_mid * dt);
        let gamma_next = UnitQuaternion::new_normalize(*gamma_next.quaternion());

        let r0 = self.gamma.to_rotation_matrix().into_inner();
        let r1 = gamma_next.to_rotation_matrix().into_inner();
        let a0 = first.accel - self.lin_bias_accel;
        let a1 = second.accel - self.lin_bias_accel;
        let accel_mid = 0.5 * (r0 * a0 + r1 * a1);

        let alpha_next = self.alpha + self.beta * dt + 0.5 * accel_mid * dt * dt;
        let beta_next = self.beta + accel_mid * dt;

        // Error-state transition. Velocity-row blocks first; the position row
        // is the velocity row scaled by dt/2 plus the beta coupling.
        let f_theta_theta = Matrix3::identity() - skew(&gyro_mid) * dt;
        let r0a0x = r0 * skew(&a0);
        let r1a1x = r1 * skew(&a1);
        let f_beta_theta = -0.5 * dt * (r0a0x + r1a1x * f_theta_theta);
        let f_beta_ba = -0.5 * dt * (r0 + r1);
        let f_beta_bg = 0.5 * dt * dt * r1a1x;

        let mut f = Mat15::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(0.5 * dt * f_beta_theta));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(0.5 * dt * f_beta_ba));
        f.fixed_view_mut::<3, 3>(0, 12).copy_from(&(0.5 * dt * f_beta_bg));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&f_beta_theta);
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&f_beta_ba);
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&f_beta_bg);
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&f_theta_theta);
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-Matrix3::identity() * dt));

        // Noise order: (n_a0, n_g0, n_a1, n_g1, n_ba, n_bg). The two white
        // samples of the midpoint both drive theta and, through it, beta.
        let mut v = SMatrix::<f64, 15, 18>::zeros();
        let v_beta_g = 0.25 * dt * dt * r1a1x;
        v.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-0.25 * dt * dt * r0));
        v.fixed_view_mut::<3, 3>(0, 3).copy_from(&(0.5 * dt * v_beta_g));
        v.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.25 * dt * dt * r1));
        v.fixed_view_mut::<3, 3>(0, 9).copy_from(&(0.5 * dt * v_beta_g));
        v.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-0.5 * dt * r0));
        v.fixed_view_mut::<3, 3>(3, 3).copy_from(&v_beta_g);
        v.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-0.5 * dt * r1));
        v.fixed_view_mut::<3, 3>(3, 9).copy_from(&v_beta_g);
        v.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-Matrix3::identity() * (0.5 * dt)));
        v.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-Matrix3::identity() * (0.5 * dt)));
        v.fixed_view_mut::<3, 3>(9, 12).copy_from(&Matrix3::identity());
        v.fixed_view_mut::<3, 3>(12, 15).copy_from(&Matrix3::identity());

        // White noise discretizes as sigma^2/dt, bias walks as sigma^2*dt.
        let mut q = SMatrix::<f64, 18, 18>::zeros();
        let sg2 = self.noise.gyro_noise_density.powi(2) / dt;
        let sa2 = self.noise.accel_noise_density.powi(2) / dt;
        let swg2 = self.noise.gyro_bias_walk.powi(2) * dt;
        let swa2 = self.noise.accel_bias_walk.powi(2) * dt;
        for i in 0..3 {
            q[(i, i)] = sa2;
            q[(3 + i, 3 + i)] = sg2;
            q[(6 + i, 6 + i)] = sa2;
            q[(9 + i, 9 + i)] = sg2;
            q[(12 + i, 12 + i)] = swa2;
            q[(15 + i, 15 + i)] = swg2;
        }

        let covariance = f * self.covariance * f.transpose() + v * q * v.transpose();
        let covariance = 0.5 * (covariance + covariance.transpose());

        Ok(Self {
            alpha: alpha_next,
            beta: beta_next,
            gamma: gamma_next,
            duration: self.duration + dt,
            lin_bias_accel: self.lin_bias_accel,
            lin_bias_gyro: self.lin_bias_gyro,
            jacobian: f * self.jacobian,
            covariance,
            noise: self.noise,
        })
    }

    /// Folds a whole sample run (consecutive pairs) into one delta.
    pub fn integrate_batch(&self, samples: &[ImuSample]) -> Result<Self, ImuError> {
        let mut delta = self.clone();
        for pair in samples.windows(2) {
            delta = delta.integrate(&pair[0], &pair[1])?;
        }
        Ok(delta)
    }

    /// First-order re-linearization of the increments at new bias values:
    /// alpha and beta move along their bias Jacobians, gamma composes with
    /// quat(1, J_gamma_bg * db / 2).
    pub fn bias_corrected(
        &self,
        bias_accel: Vector3<f64>,
        bias_gyro: Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>, UnitQuaternion<f64>) {
        let dba = bias_accel - self.lin_bias_accel;
        let dbg = bias_gyro - self.lin_bias_gyro;
        let alpha = self.alpha
            + self.jacobian_alpha_bias_accel() * dba
            + self.jacobian_alpha_bias_gyro() * dbg;
        let beta = self.beta
            + self.jacobian_beta_bias_accel() * dba
            + self.jacobian_beta_bias_gyro() * dbg;
        let half = 0.5 * (self.jacobian_gamma_bias_gyro() * dbg);
        let gamma = UnitQuaternion::new_normalize(
            *self.gamma.quaternion() * Quaternion::new(1.0, half.x, half.y, half.z),
        );
        (alpha, beta, gamma)
    }

    /// Information weight: inverse of the covariance with eigenvalues floored
    /// at 1e-12 so rank-deficient (for example zero-noise) deltas stay usable.
    pub fn weight_matrix(&self) -> Mat15 {
        invert_psd_with_floor(&self.covariance, 1e-12)
    }
}

/// Symmetric PSD inverse with an eigenvalue floor.
pub fn invert_psd_with_floor(m: &Mat15, floor: f64) -> Mat15 {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut inv = Mat15::zeros();
    for i in 0..ERROR_STATE_DIM {
        let lambda = eig.eigenvalues[i].max(floor);
        let v = eig.eigenvectors.column(i);
        inv += v * v.transpose() / lambda;
    }
    0.5 * (inv + inv.transpose())
}

/// The 15-row inertial residual between two frames.
///
/// Blocks, in order: position, velocity, rotation (2 * vector part of
/// q_k^-1 * q_{k+1} * gamma^-1), accel-bias difference, gyro-bias
/// difference. The delta is first bias-corrected to `state_k`'s biases.
/// Gravity enters here and only here; `gravity_vector` is g^w = (0, 0, +g),
/// see [`ImuNoiseParams::gravity_vector`].
pub fn imu_residual(
    state_k: &FrameState,
    state_k1: &FrameState,
    delta: &PreintegratedDelta,
    gravity_vector: Vector3<f64>,
) -> Vec15 {
    let (alpha, beta, gamma) = delta.bias_corrected(state_k.bias_accel, state_k.bias_gyro);
    let dt = delta.duration();
    let r_bw = state_k.orientation.inverse();

    let r_p = r_bw
        * (state_k1.position - state_k.position + 0.5 * gravity_vector * dt * dt
            - state_k.velocity * dt)
        - alpha;
    let r_v = r_bw * (state_k1.velocity + gravity_vector * dt - state_k.velocity) - beta;

    let q_err = state_k.orientation.inverse() * state_k1.orientation * gamma.inverse();
    // Stay on the principal cover so small rotation errors map near zero.
    let sign = if q_err.w >= 0.0 { 2.0 } else { -2.0 };
    let r_q = sign * q_err.imag();

    let mut r = Vec15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_p);
    r.fixed_rows_mut::<3>(3).copy_from(&r_v);
    r.fixed_rows_mut::<3>(6).copy_from(&r_q);
    r.fixed_rows_mut::<3>(9).copy_from(&(state_k1.bias_accel - state_k.bias_accel));
    r.fixed_rows_mut::<3>(12).copy_from(&(state_k1.bias_gyro - state_k.bias_gyro));
    r
}

/// Midpoint forward propagation of a navigation state through one sample
/// pair, using the state's own biases. Dynamics: p_ddot = R a_body - g^w
/// with the g^w = (0, 0, +g) convention of [`imu_residual`].
pub fn propagate_state(
    state: &FrameState,
    first: &ImuSample,
    second: &ImuSample,
    gravity_vector: Vector3<f64>,
) -> Result<FrameState, ImuError> {
    let dt = second.timestamp - first.timestamp;
    if dt <= 0.0 {
        return Err(ImuError::NonPositiveDt { t0: first.timestamp, t1: second.timestamp });
    }
    let gyro_mid = 0.5 * (first.gyro + second.gyro) - state.bias_gyro;
    let q_next = state.orientation * UnitQuaternion::from_scaled_axis(gyro_mid * dt);
    let a0 = state.orientation * (first.accel - state.bias_accel);
    let a1 = q_next * (second.accel - state.bias_accel);
    let accel_world = 0.5 * (a0 + a1) - gravity_vector;
    Ok(FrameState {
        position: state.position + state.velocity * dt + 0.5 * accel_world * dt * dt,
        velocity: state.velocity + accel_world * dt,
        orientation: q_next,
        bias_accel: state.bias_accel,
        bias_gyro: state.bias_gyro,
        timestamp: second.timestamp,
    })
}

/// A validated IMU stream with interpolation helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSeries {
    samples: Vec<ImuSample>,
}

impl ImuSeries {
    pub fn new(samples: Vec<ImuSample>) -> Result<Self, ImuError> {
        if samples.is_empty() {
            return Err(ImuError::EmptyStream);
        }
        for (index, pair) in samples.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(ImuError::NonMonotone { index: index + 1 });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn first_timestamp(&self) -> f64 {
        self.samples[0].timestamp
    }

    pub fn last_timestamp(&self) -> f64 {
        self.samples[self.samples.len() - 1].timestamp
    }

    /// Linearly interpolated virtual sample at `t`.
    fn sample_at(&self, t: f64) -> ImuSample {
        let i = match self.samples.binary_search_by(|s| s.timestamp.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.samples[i],
            Err(i) => i,
        };
        let (a, b) = (&self.samples[i - 1], &self.samples[i]);
        let u = (t - a.timestamp) / (b.timestamp - a.timestamp);
        ImuSample {
            timestamp: t,
            gyro: a.gyro.lerp(&b.gyro, u),
            accel: a.accel.lerp(&b.accel, u),
        }
    }

    /// Samples spanning `[t0, t1]` exactly: interior samples plus linearly
    /// interpolated boundary samples at `t0` and `t1`, so integration splits
    /// exactly at camera timestamps.
    pub fn between(&self, t0: f64, t1: f64) -> Result<Vec<ImuSample>, ImuError> {
        if t1 <= t0 {
            return Err(ImuError::EmptyInterval { t0, t1 });
        }
        if t0 < self.first_timestamp() || t1 > self.last_timestamp() {
            return Err(ImuError::IntervalNotCovered {
                t0,
                t1,
                have0: self.first_timestamp(),
                have1: self.last_timestamp(),
            });
        }
        let mut out = vec![self.sample_at(t0)];
        for s in &self.samples {
            if s.timestamp > t0 && s.timestamp < t1 {
                out.push(*s);
            }
        }
        out.push(self.sample_at(t1));
        Ok(out)
    }
}

/// Writes the IMU stream as `timestamp_s,wx,wy,wz,ax,ay,az`.
pub fn write_imu_csv(path: &Path, series: &ImuSeries) -> Result<(), ImuError> {
    let file = File::create(path).map_err(|e| ImuError::Io { path: path.into(), source: e })?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, line: String| -> Result<(), ImuError> {
        writeln!(w, "{line}").map_err(|e| ImuError::Io { path: path.into(), source: e })
    };
    emit(&mut w, "timestamp_s,wx,wy,wz,ax,ay,az".into())?;
    // Default float formatting round-trips f64 exactly.
    for s in series.samples() {
        emit(
            &mut w,
            format!(
                "{},{},{},{},{},{},{}",
                s.timestamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
            ),
        )?;
    }
    w.flush().map_err(|e| ImuError::Io { path: path.into(), source: e })
}

/// Reads an IMU CSV, validating the header and monotone timestamps.
pub fn read_imu_csv(path: &Path) -> Result<ImuSeries, ImuError> {
    let file = File::open(path).map_err(|e| ImuError::Io { path: path.into(), source: e })?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ImuError::Io { path: path.into(), source: e })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if line != "timestamp_s,wx,wy,wz,ax,ay,az" {
                return Err(ImuError::BadRow {
                    path: path.into(),
                    line: 1,
                    reason: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ImuError::BadRow {
                path: path.into(),
                line: i + 1,
                reason: format!("expected 7 columns, got {}", fields.len()),
            });
        }
        let mut values = [0.0f64; 7];
        for (j, f) in fields.iter().enumerate() {
            values[j] = f.trim().parse().map_err(|_| ImuError::BadRow {
                path: path.into(),
                line: i + 1,
                reason: format!("non-numeric field {f:?}"),
            })?;
        }
        samples.push(ImuSample {
            timestamp: values[0],
            gyro: Vector3::new(values[1], values[2], values[3]),
            accel: Vector3::new(values[4], values[5], values[6]),
        });
    }
    ImuSeries::new(samples)
}
