//! Static initialization from a stationary IMU stretch, and the keyframe
//! selection policy used by the front end.

use nalgebra::{UnitQuaternion, Vector3};

use super::EstimatorError;
use crate::imu::{FrameState, ImuNoiseParams, ImuSample};

/// Fewest IMU samples accepted for static initialization.
pub const MIN_INIT_SAMPLES: usize = 20;
/// Largest summed per-axis accelerometer variance, (m/s^2)^2, still
/// considered stationary.
pub const STATIONARY_ACCEL_VARIANCE: f64 = 0.05;
/// Largest tolerated gap between the mean specific-force norm and gravity.
pub const GRAVITY_NORM_TOLERANCE: f64 = 0.5;

/// Builds the first navigation state from a stationary IMU stretch:
/// gravity-aligned attitude (roll and pitch; yaw is unobservable and left
/// at zero), the mean gyro reading as gyro bias, zero position, velocity,
/// and accelerometer bias.
pub fn initialize(
    samples: &[ImuSample],
    noise: &ImuNoiseParams,
) -> Result<FrameState, EstimatorError> {
    if samples.len() < MIN_INIT_SAMPLES {
        return Err(EstimatorError::TooFewSamples {
            got: samples.len(),
            needed: MIN_INIT_SAMPLES,
        });
    }
    let count = samples.len() as f64;
    let mean_accel: Vector3<f64> =
        samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / count;
    let mean_gyro: Vector3<f64> =
        samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / count;
    let accel_variance: f64 = samples
        .iter()
        .map(|s| (s.accel - mean_accel).norm_squared())
        .sum::<f64>()
        / count;
    if accel_variance > STATIONARY_ACCEL_VARIANCE {
        return Err(EstimatorError::NotStationary { accel_variance });
    }
    let gravity = noise.gravity_magnitude;
    if (mean_accel.norm() - gravity).abs() > GRAVITY_NORM_TOLERANCE {
        return Err(EstimatorError::GravityMagnitude {
            measured: mean_accel.norm(),
            expected: gravity,
        });
    }

    // Stationary, the accelerometer reads R^T g^w: the minimal rotation
    // taking the measured direction onto +z is the roll/pitch attitude.
    let orientation = UnitQuaternion::rotation_between(&mean_accel, &Vector3::z())
        .unwrap_or_else(|| {
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
        });
    Ok(FrameState {
        position: Vector3::zeros(),
        velocity: Vector3::zeros(),
        orientation,
        bias_accel: Vector3::zeros(),
        bias_gyro: mean_gyro,
        timestamp: samples.last().expect("length checked").timestamp,
    })
}

/// When a tracked frame is promoted to a keyframe.
#[derive(Debug, Clone, Copy)]
pub struct KeyframePolicy {
    /// Mean feature travel since the last keyframe that forces a new one.
    pub parallax_threshold_px: f64,
    /// Fraction of the feature budget below which tracking is considered
    /// starved and a new keyframe is forced.
    pub min_tracked_fraction: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { parallax_threshold_px: 10.0, min_tracked_fraction: 0.6 }
    }
}

/// A frame becomes a keyframe when the scene moved enough (mean parallax)
/// or tracking decayed enough (surviving features below the budget floor).
pub fn select_keyframe(
    policy: &KeyframePolicy,
    mean_parallax_px: f64,
    tracked: usize,
    budget: usize,
) -> bool {
    mean_parallax_px > policy.parallax_threshold_px
        || (tracked as f64) < policy.min_tracked_fraction * budget as f64
}
