//! Odometry glue: a feature-tracking front end feeding a sliding-window
//! back end through immutable frame packets.
//!
//! The front end consumes timestamped images plus the inertial stream,
//! tracks features across consecutive frames with gyro-seeded alignment,
//! and promotes a frame to a keyframe when the scene moved enough or
//! tracking decayed enough. Each keyframe crosses to the back end as a
//! [`FramePacket`]: the predicted navigation state, the preintegrated
//! inertial delta since the previous keyframe, and that frame's pixel
//! observations. Non-keyframes contribute their inertial data to the next
//! delta and are dropped after tracking. A keyframe whose tracks all died
//! (a shutter pause, aggressive motion) is still accepted — the window
//! then constrains it through the inertial factor alone, so propagation
//! continues across tracking dropouts.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{Isometry3, Vector2};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::detector::{
    decode_keypoints, forward, handcrafted_keypoints, DetectorError, ForwardOptions,
    NetworkWeights,
};
use crate::estimator::{
    initialize, select_keyframe, CostReport, EstimatorError, KeyframePolicy, SlidingWindow,
    SolverConfig,
};
use crate::eval::TimingLog;
use crate::image::{build_pyramid, ImageError, RadiometricImage};
use crate::imu::{
    propagate_state, FrameState, ImuError, ImuNoiseParams, ImuSeries, PreintegratedDelta,
};
use crate::tracker::{replenish_features, track_frame, TrackedFeature, TrackerConfig, TrackerError};
use crate::trajectory_io::TimedPose;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline configuration: {reason}")]
    Config { reason: String },
    #[error("frame at t={t} does not advance past the previous frame at t={previous}")]
    NonMonotonicFrame { t: f64, previous: f64 },
    #[error("initialization never succeeded: {reason}")]
    NeverInitialized { reason: String },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Source of replenishment candidates for the tracker.
#[derive(Debug, Clone)]
pub enum FeatureDetector {
    /// Multi-scale difference-of-boxes blob detector: deterministic,
    /// training-free, and cheap enough to run on every keyframe.
    ContrastBlobs,
    /// Trained convolutional detector, decoded at `threshold` with
    /// non-maximum suppression of Chebyshev radius `nms_radius`.
    Network { weights: Box<NetworkWeights>, threshold: f64, nms_radius: usize },
}

impl FeatureDetector {
    /// Keypoint candidates as (pixel, score) pairs, at most `max_points`.
    fn detect(
        &self,
        image: &RadiometricImage,
        max_points: usize,
    ) -> Result<Vec<(Vector2<f64>, f64)>, PipelineError> {
        let keypoints = match self {
            Self::ContrastBlobs => handcrafted_keypoints(image, max_points),
            Self::Network { weights, threshold, nms_radius } => {
                let options = ForwardOptions { softmax_decode: true, include_descriptors: false };
                let (heatmap, _) = forward(weights, image, options)?;
                decode_keypoints(&heatmap, *threshold, *nms_radius, max_points)
            }
        };
        Ok(keypoints.into_iter().map(|k| (k.position, k.score)).collect())
    }
}

/// Everything the pipeline needs besides the camera and the data itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub solver: SolverConfig,
    pub noise: ImuNoiseParams,
    pub keyframes: KeyframePolicy,
    pub detector: FeatureDetector,
    /// Length of the trailing inertial stretch handed to static
    /// initialization, seconds.
    pub init_window_s: f64,
    /// Confidence of the initial gravity alignment, radians. Dominated by
    /// the unknown accelerometer bias, not by averaging noise.
    pub init_tilt_sigma_rad: f64,
    /// Confidence that the rig was still during initialization, m/s.
    pub init_velocity_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            solver: SolverConfig::default(),
            noise: ImuNoiseParams::default(),
            keyframes: KeyframePolicy::default(),
            detector: FeatureDetector::ContrastBlobs,
            init_window_s: 0.5,
            init_tilt_sigma_rad: 0.01,
            init_velocity_sigma: 0.02,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.tracker.validate()?;
        self.solver.validate()?;
        self.noise.validate()?;
        if !(self.init_window_s > 0.0) {
            return Err(PipelineError::Config {
                reason: "init_window_s must be positive".into(),
            });
        }
        if !(self.init_tilt_sigma_rad > 0.0) || !(self.init_velocity_sigma > 0.0) {
            return Err(PipelineError::Config {
                reason: "initial prior sigmas must be positive".into(),
            });
        }
        if !(self.keyframes.parallax_threshold_px > 0.0) {
            return Err(PipelineError::Config {
                reason: "parallax threshold must be positive".into(),
            });
        }
        if !(self.keyframes.min_tracked_fraction > 0.0)
            || self.keyframes.min_tracked_fraction > 1.0
        {
            return Err(PipelineError::Config {
                reason: "min tracked fraction must lie in (0, 1]".into(),
            });
        }
        if let FeatureDetector::Network { threshold, .. } = &self.detector {
            if !(*threshold > 0.0 && *threshold < 1.0) {
                return Err(PipelineError::Config {
                    reason: "detector threshold must lie in (0, 1)".into(),
                });
            }
        }
        Ok(())
    }
}

/// Immutable hand-off unit from the front end to the back end: one
/// keyframe's predicted state, inertial delta, and observations.
#[derive(Debug, Clone)]
pub struct FramePacket {
    pub frame_id: u64,
    /// Predicted navigation state at the frame time (the initial guess).
    pub state: FrameState,
    /// Preintegrated delta from the previous keyframe; `None` only for
    /// the first keyframe of a run.
    pub delta: Option<PreintegratedDelta>,
    /// (landmark id, pixel) observations of this frame.
    pub observations: Vec<(u64, Vector2<f64>)>,
}

/// Sliding-window back end. Accepts keyframe packets, keeps the window at
/// its configured length, and records each keyframe's pose at the moment
/// it leaves the window — its most refined estimate.
#[derive(Debug)]
pub struct BackEnd {
    camera: CameraModel,
    config: SolverConfig,
    window: SlidingWindow,
    retired: Vec<TimedPose>,
    solves: usize,
    max_final_cost: f64,
}

impl BackEnd {
    pub fn new(camera: CameraModel, config: SolverConfig) -> Result<Self, EstimatorError> {
        config.validate()?;
        Ok(Self {
            camera,
            config,
            window: SlidingWindow::new(),
            retired: Vec::new(),
            solves: 0,
            max_final_cost: 0.0,
        })
    }

    /// Pushes the packet's keyframe, records its observations, promotes
    /// any newly triangulable landmarks, optimizes, and marginalizes the
    /// window back down to length.
    pub fn accept(&mut self, packet: FramePacket) -> Result<CostReport, EstimatorError> {
        self.window.push_frame(packet.frame_id, packet.state, packet.delta)?;
        for (landmark, pixel) in &packet.observations {
            self.window.observe(*landmark, packet.frame_id, *pixel)?;
        }
        self.window.triangulate_pending(&self.camera, &self.config.triangulation_gates());
        let report = self.window.solve(&self.camera, &self.config)?;
        self.solves += 1;
        self.max_final_cost = self.max_final_cost.max(report.final_cost);
        while self.window.len() > self.config.window_size {
            let (_, state) = self.window.frames()[0];
            self.retired.push(timed_pose(&state));
            self.window.marginalize_oldest(&self.camera, &self.config)?;
        }
        Ok(report)
    }

    /// Pins what static initialization measured about the given frame —
    /// gravity-referenced tilt and velocity — so the window's otherwise
    /// flat tilt-plus-velocity-drift direction cannot wander over a long
    /// run. Call once, on the first keyframe, before the next packet.
    pub fn pin_initial_state(
        &mut self,
        frame_id: u64,
        sigma_tilt_rad: f64,
        sigma_velocity: f64,
    ) -> Result<(), EstimatorError> {
        self.window.set_initial_prior(frame_id, sigma_tilt_rad, sigma_velocity)
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    /// Keyframe poses already pushed out of the window, oldest first.
    pub fn retired(&self) -> &[TimedPose] {
        &self.retired
    }

    pub fn solves(&self) -> usize {
        self.solves
    }

    /// Largest post-solve cost seen so far; a divergence tripwire.
    pub fn max_final_cost(&self) -> f64 {
        self.max_final_cost
    }

    /// Retired poses followed by the still-windowed keyframes, in time
    /// order.
    pub fn finish(mut self) -> Vec<TimedPose> {
        for (_, state) in self.window.frames() {
            self.retired.push(timed_pose(state));
        }
        self.retired
    }
}

fn timed_pose(state: &FrameState) -> TimedPose {
    TimedPose::new(
        state.timestamp,
        Isometry3::from_parts(state.position.into(), state.orientation),
    )
}

/// Counters describing one pipeline run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineStats {
    pub frames_seen: usize,
    /// Frames discarded while waiting for a stationary stretch.
    pub frames_awaiting_init: usize,
    /// Frames that went through tracking (everything after initialization).
    pub frames_tracked: usize,
    pub keyframes: usize,
    /// Keyframes that carried no surviving track observation and were
    /// bridged on inertial data alone; replenishment may still seed new
    /// landmarks at such frames.
    pub imu_only_keyframes: usize,
    pub tracks_spawned: usize,
    pub tracks_culled: usize,
    pub solves: usize,
    /// Largest post-solve cost across the run.
    pub max_solve_cost: f64,
}

/// What the pipeline did with one input frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameVerdict {
    /// Discarded: still waiting for a stationary stretch to initialize on.
    AwaitingInit,
    /// Became the anchor keyframe.
    Initialized { frame_id: u64 },
    /// Tracked only; its inertial data merges into the next delta.
    Tracked { survived: usize, mean_parallax_px: f64 },
    /// Promoted to a keyframe and optimized.
    Keyframe { frame_id: u64, observations: usize, spawned: usize },
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// One pose per keyframe, world frame, time-ordered.
    pub trajectory: Vec<TimedPose>,
    pub timing: TimingLog,
    pub stats: PipelineStats,
}

/// Front-end bookkeeping between frames once initialization succeeded.
#[derive(Debug)]
struct Running {
    /// Timestamp of the previous processed frame.
    prev_time: f64,
    /// Navigation state propagated to `prev_time`.
    predicted: FrameState,
    /// Preintegration since the last keyframe, linearized at its solved
    /// biases. Non-keyframes extend it; keyframes consume it.
    carry: PreintegratedDelta,
    /// Live track pixels at the last keyframe — the parallax baselines.
    reference_pixels: HashMap<u64, Vector2<f64>>,
}

#[derive(Debug)]
enum Phase {
    AwaitingInit { last_failure: Option<String> },
    Running(Running),
}

/// The full odometry loop over one image + inertial sequence.
///
/// Feed frames in time order with [`process_frame`](Self::process_frame);
/// the inertial series must cover every inter-frame interval. The run
/// starts in an initialization phase that discards frames until a
/// stationary stretch fixes the gravity direction and gyro bias; from
/// then on every frame is tracked and keyframes stream into the back end.
#[derive(Debug)]
pub struct OdometryPipeline {
    camera: CameraModel,
    imu: ImuSeries,
    config: PipelineConfig,
    back_end: BackEnd,
    features: Vec<TrackedFeature>,
    next_track_id: u64,
    frame_index: u64,
    last_time: Option<f64>,
    phase: Phase,
    timing: TimingLog,
    stats: PipelineStats,
}

impl OdometryPipeline {
    pub fn new(
        camera: CameraModel,
        imu: ImuSeries,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let back_end = BackEnd::new(camera.clone(), config.solver.clone())?;
        Ok(Self {
            camera,
            imu,
            config,
            back_end,
            features: Vec::new(),
            next_track_id: 0,
            frame_index: 0,
            last_time: None,
            phase: Phase::AwaitingInit { last_failure: None },
            timing: TimingLog::new(),
            stats: PipelineStats::default(),
        })
    }

    pub fn is_initialized(&self) -> bool {
        matches!(self.phase, Phase::Running(_))
    }

    pub fn back_end(&self) -> &BackEnd {
        &self.back_end
    }

    pub fn timing(&self) -> &TimingLog {
        &self.timing
    }

    /// Live counters; the solve totals are merged in at [`finish`](Self::finish).
    pub fn stats(&self) -> PipelineStats {
        self.stats
    }

    /// Ingests the frame taken at `t`. Frames must arrive in strictly
    /// increasing time order.
    pub fn process_frame(
        &mut self,
        t: f64,
        image: &RadiometricImage,
    ) -> Result<FrameVerdict, PipelineError> {
        let wall = Instant::now();
        if let Some(previous) = self.last_time {
            if t <= previous {
                return Err(PipelineError::NonMonotonicFrame { t, previous });
            }
        }
        self.last_time = Some(t);
        let frame_id = self.frame_index;
        self.frame_index += 1;
        self.stats.frames_seen += 1;

        let verdict = if matches!(self.phase, Phase::AwaitingInit { .. }) {
            self.try_initialize(t, image, frame_id)?
        } else {
            self.advance(t, image, frame_id)?
        };
        self.timing.record("frame", wall.elapsed().as_secs_f64());
        Ok(verdict)
    }

    /// Flushes the window into the trajectory and hands everything back.
    /// Fails when no frame ever initialized, carrying the last reason.
    pub fn finish(self) -> Result<PipelineOutput, PipelineError> {
        let Self { back_end, phase, timing, mut stats, .. } = self;
        match phase {
            Phase::AwaitingInit { last_failure } => Err(PipelineError::NeverInitialized {
                reason: last_failure
                    .unwrap_or_else(|| "no frames were processed".into()),
            }),
            Phase::Running(_) => {
                stats.solves = back_end.solves();
                stats.max_solve_cost = back_end.max_final_cost();
                Ok(PipelineOutput { trajectory: back_end.finish(), timing, stats })
            }
        }
    }

    fn note_init_failure(&mut self, reason: String) {
        if let Phase::AwaitingInit { last_failure } = &mut self.phase {
            *last_failure = Some(reason);
        }
    }

    /// Attempts static initialization on the inertial stretch trailing
    /// `t`. Failure is not an error: the frame is discarded and the next
    /// one tries again.
    fn try_initialize(
        &mut self,
        t: f64,
        image: &RadiometricImage,
        frame_id: u64,
    ) -> Result<FrameVerdict, PipelineError> {
        let t0 = t - self.config.init_window_s;
        if t0 < self.imu.first_timestamp() {
            self.note_init_failure(
                "inertial stream does not yet cover the initialization window".into(),
            );
            self.stats.frames_awaiting_init += 1;
            return Ok(FrameVerdict::AwaitingInit);
        }
        let samples = self.imu.between(t0, t)?;
        let mut state = match initialize(&samples, &self.config.noise) {
            Ok(state) => state,
            Err(error) => {
                self.note_init_failure(error.to_string());
                self.stats.frames_awaiting_init += 1;
                return Ok(FrameVerdict::AwaitingInit);
            }
        };
        // The stretch was stationary, so the state holds at the frame time.
        state.timestamp = t;

        let clock = Instant::now();
        let pyramid = build_pyramid(image, self.config.tracker.pyramid_levels)?;
        let candidates = self.config.detector.detect(image, self.config.tracker.max_features)?;
        let spawned = replenish_features(
            &mut self.features,
            &candidates,
            &pyramid,
            frame_id,
            &mut self.next_track_id,
            &self.config.tracker,
        )?;
        self.timing.record("detect", clock.elapsed().as_secs_f64());
        self.stats.tracks_spawned += spawned;

        let observations = live_observations(&self.features);
        let clock = Instant::now();
        self.back_end.accept(FramePacket { frame_id, state, delta: None, observations })?;
        self.back_end.pin_initial_state(
            frame_id,
            self.config.init_tilt_sigma_rad,
            self.config.init_velocity_sigma,
        )?;
        self.timing.record("solve", clock.elapsed().as_secs_f64());

        let refined = *self
            .back_end
            .window()
            .frame_state(frame_id)
            .expect("frame was just pushed");
        self.stats.keyframes += 1;
        self.phase = Phase::Running(Running {
            prev_time: t,
            predicted: refined,
            carry: PreintegratedDelta::new(
                self.config.noise,
                refined.bias_accel,
                refined.bias_gyro,
            ),
            reference_pixels: reference_pixels(&self.features),
        });
        Ok(FrameVerdict::Initialized { frame_id })
    }

    /// One tracked frame after initialization: extend the inertial carry,
    /// track, and either drop the frame or promote it to a keyframe.
    fn advance(
        &mut self,
        t: f64,
        image: &RadiometricImage,
        frame_id: u64,
    ) -> Result<FrameVerdict, PipelineError> {
        let Phase::Running(run) = &mut self.phase else {
            unreachable!("advance runs only after initialization");
        };
        let frame_gap = t - run.prev_time;

        let clock = Instant::now();
        let samples = self.imu.between(run.prev_time, t)?;
        let carried = run.carry.integrate_batch(&samples)?;
        // Relative body rotation over this frame gap, for seeding. Both
        // gammas share the carry's linearization biases, so the bias terms
        // cancel in the relative rotation.
        let leg_rotation = run.carry.gamma().inverse() * carried.gamma();
        let gravity = self.config.noise.gravity_vector();
        for pair in samples.windows(2) {
            run.predicted = propagate_state(&run.predicted, &pair[0], &pair[1], gravity)?;
        }
        run.carry = carried;
        run.prev_time = t;
        self.timing.record("preintegrate", clock.elapsed().as_secs_f64());

        let clock = Instant::now();
        let pyramid = build_pyramid(image, self.config.tracker.pyramid_levels)?;
        let summary = track_frame(
            &mut self.features,
            &pyramid,
            &leg_rotation,
            &self.camera,
            frame_id,
            frame_gap,
            &self.config.tracker,
        )?;
        self.timing.record("track", clock.elapsed().as_secs_f64());
        self.stats.frames_tracked += 1;
        self.stats.tracks_culled += summary.culled;

        let parallax = mean_parallax(&self.features, &run.reference_pixels);
        // The replenishment grid holds one live track per cell, so small
        // images cannot reach a large nominal budget; the starvation rule
        // has to judge against what is reachable or it fires on every frame.
        let budget = effective_budget(&self.config.tracker, image.width(), image.height());
        if !select_keyframe(&self.config.keyframes, parallax, summary.survived, budget) {
            return Ok(FrameVerdict::Tracked {
                survived: summary.survived,
                mean_parallax_px: parallax,
            });
        }

        // Keyframe. Surviving tracks observe first; replenishment then
        // refills the grid and the newcomers take their first observation
        // here, so they become triangulable one keyframe later.
        self.features.retain(|f| f.track.is_alive());
        let mut observations = live_observations(&self.features);
        let survivors = observations.len();

        let mut spawned = 0;
        if self.features.len() < budget {
            let clock = Instant::now();
            let candidates = self.config.detector.detect(image, budget)?;
            let before = self.features.len();
            spawned = replenish_features(
                &mut self.features,
                &candidates,
                &pyramid,
                frame_id,
                &mut self.next_track_id,
                &self.config.tracker,
            )?;
            observations.extend(
                self.features[before..].iter().map(|f| (f.track.id(), f.position())),
            );
            self.timing.record("detect", clock.elapsed().as_secs_f64());
            self.stats.tracks_spawned += spawned;
        }

        let observed = observations.len();
        let clock = Instant::now();
        self.back_end.accept(FramePacket {
            frame_id,
            state: run.predicted,
            delta: Some(run.carry.clone()),
            observations,
        })?;
        self.timing.record("solve", clock.elapsed().as_secs_f64());

        let refined = *self
            .back_end
            .window()
            .frame_state(frame_id)
            .expect("frame was just pushed");
        run.predicted = refined;
        run.carry = PreintegratedDelta::new(
            self.config.noise,
            refined.bias_accel,
            refined.bias_gyro,
        );
        run.reference_pixels = reference_pixels(&self.features);
        self.stats.keyframes += 1;
        if survivors == 0 {
            self.stats.imu_only_keyframes += 1;
        }
        Ok(FrameVerdict::Keyframe { frame_id, observations: observed, spawned })
    }
}

/// Largest live-track count the replenishment grid can actually hold on
/// an image of this size, capped by the configured feature budget.
fn effective_budget(cfg: &TrackerConfig, width: usize, height: usize) -> usize {
    let cells = width.div_ceil(cfg.grid_cell_size) * height.div_ceil(cfg.grid_cell_size);
    cfg.max_features.min(cells)
}

fn live_observations(features: &[TrackedFeature]) -> Vec<(u64, Vector2<f64>)> {
    features
        .iter()
        .filter(|f| f.track.is_alive())
        .map(|f| (f.track.id(), f.position()))
        .collect()
}

fn reference_pixels(features: &[TrackedFeature]) -> HashMap<u64, Vector2<f64>> {
    features
        .iter()
        .filter(|f| f.track.is_alive())
        .map(|f| (f.track.id(), f.position()))
        .collect()
}

/// Mean pixel travel of live tracks since the last keyframe. Tracks
/// without a baseline (none, this early) are skipped; no baselines at all
/// reads as zero parallax.
fn mean_parallax(
    features: &[TrackedFeature],
    reference: &HashMap<u64, Vector2<f64>>,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for feature in features.iter().filter(|f| f.track.is_alive()) {
        if let Some(anchor) = reference.get(&feature.track.id()) {
            sum += (feature.position() - anchor).norm();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fixtures::{
        excited_truth_state, rig, FRAME_DT, TURN_RATE, WORLD_ACCEL,
    };
    use crate::eval::ate;
    use crate::imu::ImuSample;
    use crate::sim::scene::{RoomParams, SceneModel};
    use crate::sim::trajectory::{CircularLoopParams, Trajectory};
    use crate::sim::{synthesize_imu, NucGap, SimConfig, SimError, SimSession};
    use nalgebra::{Point3, UnitQuaternion, Vector3};

    /// Exact inertial samples covering keyframe leg `k -> k+1` of the
    /// turning, accelerating fixture trajectory; the midpoint integrator
    /// reproduces its closed-form states exactly.
    fn leg_samples(k: usize) -> Vec<ImuSample> {
        let noise = ImuNoiseParams::default();
        let gravity = noise.gravity_vector();
        let omega = Vector3::from(TURN_RATE);
        let world_accel = Vector3::from(WORLD_ACCEL);
        let t0 = k as f64 * FRAME_DT;
        let steps = 80;
        let dt = FRAME_DT / steps as f64;
        (0..=steps)
            .map(|i| {
                let t = t0 + i as f64 * dt;
                let attitude = UnitQuaternion::from_scaled_axis(omega * t);
                ImuSample {
                    timestamp: t,
                    gyro: omega,
                    accel: attitude.inverse() * (world_accel + gravity),
                }
            })
            .collect()
    }

    /// Four fresh world points placed ahead of the keyframe-`k` pose, the
    /// way replenishment keeps dropping new landmarks into view.
    fn landmark_batch(k: usize) -> Vec<(u64, Vector3<f64>)> {
        let state = excited_truth_state(k);
        let jitter = 0.15 * ((k % 3) as f64) - 0.15;
        [
            Vector3::new(4.0, -1.0 + jitter, 0.6),
            Vector3::new(4.0, 1.0 - jitter, -0.4 - jitter),
            Vector3::new(5.5, -0.7 - jitter, -0.9),
            Vector3::new(5.5, 0.8 + jitter, 0.8 - jitter),
        ]
        .iter()
        .enumerate()
        .map(|(i, offset)| {
            ((100 * k + i) as u64, state.orientation * offset + state.position)
        })
        .collect()
    }

    fn visible_pixel(
        camera: &CameraModel,
        state: &FrameState,
        point: Vector3<f64>,
    ) -> Option<Vector2<f64>> {
        let pose = Isometry3::from_parts(state.position.into(), state.orientation);
        let p_cam = camera.world_to_camera(&pose) * Point3::from(point);
        let pixel = camera.project(&p_cam.coords)?;
        (pixel.x >= 0.0 && pixel.x <= 319.0 && pixel.y >= 0.0 && pixel.y <= 239.0)
            .then_some(pixel)
    }

    fn exact_packet(
        k: usize,
        refined: &FrameState,
        landmarks: &[(u64, Vector3<f64>)],
    ) -> FramePacket {
        let noise = ImuNoiseParams::default();
        let truth = excited_truth_state(k);
        let (state, delta) = if k == 0 {
            (truth, None)
        } else {
            let samples = leg_samples(k - 1);
            let mut predicted = *refined;
            for pair in samples.windows(2) {
                predicted =
                    propagate_state(&predicted, &pair[0], &pair[1], noise.gravity_vector())
                        .unwrap();
            }
            let delta = PreintegratedDelta::new(noise, refined.bias_accel, refined.bias_gyro)
                .integrate_batch(&samples)
                .unwrap();
            (predicted, Some(delta))
        };
        let observations = landmarks
            .iter()
            .filter_map(|(id, p)| visible_pixel(&rig(), &truth, *p).map(|px| (*id, px)))
            .collect();
        FramePacket { frame_id: k as u64, state, delta, observations }
    }

    // Sequential consistency on exact data: predictions propagate from the
    // previous *solved* state, landmarks stream in and out of view, and the
    // window marginalizes 14 times. Every retired pose must still sit on
    // the ground truth to solver precision.
    #[test]
    fn back_end_stays_on_truth_through_marginalization() {
        let solver = SolverConfig::default();
        let mut back_end = BackEnd::new(rig(), solver.clone()).unwrap();
        let mut landmarks: Vec<(u64, Vector3<f64>)> = Vec::new();
        let mut refined = excited_truth_state(0);
        let n = 24;
        for k in 0..n {
            landmarks.extend(landmark_batch(k));
            let packet = exact_packet(k, &refined, &landmarks);
            assert!(k == 0 || !packet.observations.is_empty(), "no visible landmarks at {k}");
            back_end.accept(packet).unwrap();
            refined = *back_end.window().frame_state(k as u64).unwrap();
        }
        assert_eq!(back_end.window().len(), solver.window_size);
        assert_eq!(back_end.retired().len(), n - solver.window_size);
        let max_cost = back_end.max_final_cost();
        assert!(max_cost < 1e-9, "max solve cost {max_cost}");

        let trajectory = back_end.finish();
        assert_eq!(trajectory.len(), n);
        for (k, pose) in trajectory.iter().enumerate() {
            let truth = excited_truth_state(k);
            assert!((pose.timestamp - truth.timestamp).abs() < 1e-12);
            let dp = (pose.pose.translation.vector - truth.position).norm();
            let dr = pose.pose.rotation.angle_to(&truth.orientation);
            assert!(dp < 1e-6, "frame {k}: position error {dp}");
            assert!(dr < 1e-6, "frame {k}: rotation error {dr}");
        }
    }

    // A packet with zero observations must still be accepted and pinned by
    // its inertial factors alone.
    #[test]
    fn observation_free_packet_bridges_the_window() {
        let mut back_end = BackEnd::new(rig(), SolverConfig::default()).unwrap();
        let mut landmarks: Vec<(u64, Vector3<f64>)> = Vec::new();
        let mut refined = excited_truth_state(0);
        for k in 0..6 {
            landmarks.extend(landmark_batch(k));
            let mut packet = exact_packet(k, &refined, &landmarks);
            if k == 3 {
                packet.observations.clear();
            }
            back_end.accept(packet).unwrap();
            refined = *back_end.window().frame_state(k as u64).unwrap();
        }
        assert_eq!(back_end.window().len(), 6);
        for (k, (_, state)) in back_end.window().frames().iter().enumerate() {
            let truth = excited_truth_state(k);
            let dp = (state.position - truth.position).norm();
            let dr = state.orientation.angle_to(&truth.orientation);
            assert!(dp < 1e-6, "frame {k}: position error {dp}");
            assert!(dr < 1e-6, "frame {k}: rotation error {dr}");
        }
    }

    fn zero_noise_sim(gaps: Vec<NucGap>) -> (SimSession, ImuSeries) {
        let config = SimConfig {
            noise: ImuNoiseParams {
                gyro_noise_density: 0.0,
                accel_noise_density: 0.0,
                gyro_bias_walk: 0.0,
                accel_bias_walk: 0.0,
                gravity_magnitude: 9.81,
            },
            fpn_amplitude: 0.0,
            shot_noise_sigma: 0.0,
            nuc_gaps: gaps,
            ..SimConfig::default()
        };
        let trajectory = Trajectory::circular_loop(CircularLoopParams {
            radius: 2.5,
            lap_time: 24.0,
            lead_in: 1.0,
            ramp: 2.0,
            duration: 10.0,
            ..CircularLoopParams::default()
        });
        let scene = SceneModel::room(RoomParams::default(), 7);
        let session = SimSession::new(scene, trajectory, config, 7).unwrap();
        let imu = synthesize_imu(session.trajectory(), session.config(), 7).unwrap();
        (session, imu.series)
    }

    // Full front-to-back run on rendered frames: initializes during the
    // stationary lead-in, keeps tracking across a 0.5 s shutter gap, and
    // lands near the ground truth on noise-free data.
    #[test]
    fn rendered_run_survives_a_shutter_gap_and_stays_accurate() {
        let (session, imu) = zero_noise_sim(vec![NucGap { start: 4.0, duration: 0.5 }]);
        let camera = session.config().camera.clone();
        let mut pipeline =
            OdometryPipeline::new(camera, imu, PipelineConfig::default()).unwrap();

        let mut truth = Vec::new();
        for t in session.frame_times() {
            truth.push(TimedPose::new(t, session.trajectory().body_pose(t)));
            match session.render_frame(t) {
                Ok(frame) => {
                    pipeline.process_frame(t, &frame.image).unwrap();
                }
                Err(SimError::FrameSuspended { .. }) => continue,
                Err(error) => panic!("render: {error}"),
            }
        }
        assert!(pipeline.is_initialized());
        let output = pipeline.finish().unwrap();

        assert!(output.stats.keyframes >= 8, "keyframes: {:?}", output.stats);
        assert_eq!(output.trajectory.len(), output.stats.keyframes);
        assert!(output.stats.max_solve_cost.is_finite());
        // Keyframes exist on both sides of the shutter gap.
        assert!(output.trajectory.iter().any(|p| p.timestamp < 4.0));
        assert!(output.trajectory.iter().any(|p| p.timestamp > 4.5));
        for pair in output.trajectory.windows(2) {
            assert!(pair[0].timestamp < pair[1].timestamp);
        }

        let alignment = ate(&output.trajectory, &truth).unwrap();
        let stats = alignment.stats();
        assert!(stats.rmse < 0.25, "ATE rmse {} m", stats.rmse);

        // Every stage that ran left timing samples behind.
        let rows = output.timing.rows();
        let stages: Vec<&str> = rows.iter().map(|r| r.stage.as_str()).collect();
        for stage in ["detect", "frame", "preintegrate", "solve", "track"] {
            assert!(stages.contains(&stage), "missing stage {stage}: {stages:?}");
        }
    }

    fn stationary_series(duration: f64, rate: f64) -> ImuSeries {
        let n = (duration * rate) as usize;
        let samples = (0..=n)
            .map(|i| ImuSample {
                timestamp: i as f64 / rate,
                gyro: Vector3::zeros(),
                accel: Vector3::new(0.0, 0.0, 9.81),
            })
            .collect();
        ImuSeries::new(samples).unwrap()
    }

    #[test]
    fn frames_must_advance_in_time() {
        let imu = stationary_series(2.0, 100.0);
        let mut pipeline =
            OdometryPipeline::new(rig(), imu, PipelineConfig::default()).unwrap();
        let image = RadiometricImage::constant(320, 240, 0.0, 9000.0).unwrap();
        pipeline.process_frame(1.0, &image).unwrap();
        let error = pipeline.process_frame(1.0, &image).unwrap_err();
        assert!(matches!(
            error,
            PipelineError::NonMonotonicFrame { t, previous }
                if t == 1.0 && previous == 1.0
        ));
    }

    #[test]
    fn shaken_stream_never_initializes_and_finish_says_why() {
        let rate = 200.0;
        let n = (2.0 * rate) as usize;
        let samples = (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                ImuSample {
                    timestamp: t,
                    gyro: Vector3::zeros(),
                    accel: Vector3::new(2.0 * (40.0 * t).sin(), 0.0, 9.81),
                }
            })
            .collect();
        let imu = ImuSeries::new(samples).unwrap();
        let mut pipeline =
            OdometryPipeline::new(rig(), imu, PipelineConfig::default()).unwrap();
        let image = RadiometricImage::constant(320, 240, 0.0, 9000.0).unwrap();
        for t in [0.6, 1.0, 1.4] {
            let verdict = pipeline.process_frame(t, &image).unwrap();
            assert_eq!(verdict, FrameVerdict::AwaitingInit);
        }
        assert!(!pipeline.is_initialized());
        let error = pipeline.finish().unwrap_err();
        match error {
            PipelineError::NeverInitialized { reason } => {
                assert!(reason.contains("stationary"), "reason: {reason}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let config = PipelineConfig { init_window_s: 0.0, ..PipelineConfig::default() };
        assert!(matches!(config.validate(), Err(PipelineError::Config { .. })));

        let config = PipelineConfig {
            detector: FeatureDetector::Network {
                weights: Box::new(NetworkWeights::tiny(0, 8)),
                threshold: 1.2,
                nms_radius: 8,
            },
            ..PipelineConfig::default()
        };
        assert!(matches!(config.validate(), Err(PipelineError::Config { .. })));

        let config = PipelineConfig {
            keyframes: KeyframePolicy { parallax_threshold_px: 10.0, min_tracked_fraction: 0.0 },
            ..PipelineConfig::default()
        };
        assert!(matches!(config.validate(), Err(PipelineError::Config { .. })));
    }

    #[test]
    fn blob_candidates_stay_inside_the_image_and_budget() {
        let image = RadiometricImage::from_fn(96, 64, 0.0, |x, y| {
            9000.0
                + 2600.0 * ((x as f64) * 0.23).sin()
                + 2100.0 * ((y as f64) * 0.19).cos()
        })
        .unwrap();
        let candidates = FeatureDetector::ContrastBlobs.detect(&image, 10).unwrap();
        assert!(!candidates.is_empty());
        assert!(candidates.len() <= 10);
        for (position, score) in &candidates {
            assert!(*score > 0.0 && *score <= 1.0);
            assert!(position.x >= 0.0 && position.x < 96.0);
            assert!(position.y >= 0.0 && position.y < 64.0);
        }
    }
}
