//! Core algorithms for thermal-inertial odometry.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`image`]: radiometric (16-bit count) image containers, pyramids,
//!   fixed-pattern-noise synthesis, photometric augmentation, and file I/O.
//! * [`detector`]: a small convolutional keypoint detector with hand-written
//!   forward/backward passes, heatmap decoding, losses, pseudo-label
//!   generation, and a self-supervised training step.
//! * [`tracker`]: mean-normalized inverse-compositional patch alignment over
//!   image pyramids with gyro-based motion seeding.
//! * [`imu`]: midpoint preintegration of gyro/accelerometer batches with
//!   covariance and bias Jacobians, plus the associated residual.
//! * [`estimator`]: sliding-window bundle adjustment with Schur-complement
//!   landmark elimination and marginalization priors.
//! * [`sim`]: a synthetic thermal world with analytic trajectories used for
//!   testing and benchmarking.
//! * [`eval`]: repeatability, trajectory, and timing metrics.
//! * [`pipeline`]: glue that runs the full odometry loop over a sequence.
//!
//! All randomized operations take explicit seeds and are deterministic for a
//! given seed on a given platform.

pub mod camera;
pub mod detector;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod imu;
pub mod pipeline;
pub mod sim;
pub mod tracker;
pub mod trajectory_io;

pub use camera::CameraModel;
pub use detector::{ConfidenceHeatmap, DescriptorMap, Keypoint, LabelMap, NetworkWeights};
pub use estimator::{
    initialize, select_keyframe, CostReport, KeyframePolicy, Landmark, LandmarkStatus,
    SlidingWindow, SolverConfig,
};
pub use image::{FpnPattern, ImagePyramid, RadiometricImage};
pub use imu::{FrameState, ImuNoiseParams, ImuSample, ImuSeries, PreintegratedDelta};
pub use pipeline::{FeatureDetector, OdometryPipeline, PipelineConfig, PipelineOutput};
pub use tracker::{FeatureTrack, TrackedFeature, TrackerConfig, WarpSe2};
pub use trajectory_io::TimedPose;
