//! Synthetic thermal-inertial world: renders radiometric frames along an
//! analytic trajectory, synthesizes matching IMU streams, injects sensor
//! artifacts (fixed-pattern noise, shot noise, shutter-calibration gaps),
//! and writes complete datasets to disk. Every random quantity derives
//! from one seed, so regenerated datasets are bit-identical.

pub mod scene;
pub mod trajectory;

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::geometry::{Homography, HomographyError};
use crate::image::{
    apply_fpn, photometric_augment, synthesize_column_fpn, synthesize_smooth_fpn, AugmentError,
    AugmentationConfig, FpnPattern, FrameEntry, ImageError, ImageIoError, RadiometricImage,
    write_frames_csv, write_pgm16,
};
use crate::imu::{FrameState, ImuError, ImuNoiseParams, ImuSample, ImuSeries, write_imu_csv};
use crate::trajectory_io::{TimedPose, TrajectoryIoError, write_tum};

pub use scene::{PlaneTexture, RoomParams, SceneModel, ScenePlane};
pub use trajectory::{CircularLoopParams, Trajectory};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("time {t} outside trajectory duration {duration}")]
    OutsideTrajectory { t: f64, duration: f64 },
    #[error("frame suspended: t={t} falls in shutter gap [{start}, {end})")]
    FrameSuspended { t: f64, start: f64, end: f64 },
    #[error("image corpus is empty")]
    EmptyCorpus,
    #[error("could not sample a non-degenerate homography after {attempts} attempts")]
    DegenerateHomography { attempts: usize },
    #[error(transparent)]
    Homography(#[from] HomographyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    TrajectoryIo(#[from] TrajectoryIoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> SimError {
    SimError::Io { path: path.display().to_string(), source }
}

/// One scheduled shutter-calibration interval during which the camera
/// emits no frames. The interval is half-open: `[start, start+duration)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NucGap {
    pub start: f64,
    pub duration: f64,
}

impl NucGap {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end()
    }
}

/// Longest shutter gap the sensor model allows, seconds.
pub const MAX_NUC_GAP: f64 = 0.5;

/// Full description of the simulated sensor rig.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub camera_rate: f64,
    pub imu_rate: f64,
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub noise: ImuNoiseParams,
    /// Peak column fixed-pattern offset, counts.
    pub fpn_amplitude: f64,
    /// Per-pixel additive Gaussian noise, counts.
    pub shot_noise_sigma: f64,
    pub nuc_gaps: Vec<NucGap>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            camera_rate: 20.0,
            imu_rate: 200.0,
            width: 320,
            height: 240,
            camera: CameraModel::forward_rig(200.0, 200.0, 159.5, 119.5, 0.0),
            noise: ImuNoiseParams::default(),
            fpn_amplitude: 400.0,
            shot_noise_sigma: 25.0,
            nuc_gaps: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.camera_rate > 0.0) || !(self.imu_rate > 0.0) {
            return Err(SimError::Config("rates must be positive".into()));
        }
        if self.imu_rate < 10.0 * self.camera_rate {
            return Err(SimError::Config(format!(
                "imu rate {} must be at least 10x the camera rate {}",
                self.imu_rate, self.camera_rate
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SimError::Config("resolution must be non-empty".into()));
        }
        if self.fpn_amplitude < 0.0 || self.shot_noise_sigma < 0.0 {
            return Err(SimError::Config("noise amplitudes must be non-negative".into()));
        }
        self.noise
            .validate()
            .map_err(|e| SimError::Config(format!("imu noise: {e}")))?;
        let mut prev_end = f64::NEG_INFINITY;
        for gap in &self.nuc_gaps {
            if !(gap.duration > 0.0) || gap.duration > MAX_NUC_GAP {
                return Err(SimError::Config(format!(
                    "gap duration {} outside (0, {MAX_NUC_GAP}]",
                    gap.duration
                )));
            }
            if gap.start < prev_end {
                return Err(SimError::Config(
                    "gaps must be sorted and non-overlapping".into(),
                ));
            }
            prev_end = gap.end();
        }
        Ok(())
    }
}

/// A rendered frame with the exact navigation state it was taken from.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: RadiometricImage,
    pub state: FrameState,
}

// Seed salts for the independent random channels of a session. Shot noise
// uses the raw frame-time bits as its stream id instead.
const SALT_FPN_COLUMN: u64 = 0x746f_6c5f_636f_6c73;
const SALT_FPN_SMOOTH: u64 = 0x746f_6c5f_736d_6f6f;
const STREAM_GYRO_NOISE: u64 = 10;
const STREAM_ACCEL_NOISE: u64 = 11;
const STREAM_GYRO_WALK: u64 = 12;
const STREAM_ACCEL_WALK: u64 = 13;

/// Renderer state for one simulated sequence. The fixed-pattern offsets are
/// drawn once at construction and shared by every frame of the session.
#[derive(Debug, Clone)]
pub struct SimSession {
    scene: SceneModel,
    trajectory: Trajectory,
    config: SimConfig,
    seed: u64,
    fpn: FpnPattern,
}

impl SimSession {
    pub fn new(
        scene: SceneModel,
        trajectory: Trajectory,
        config: SimConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let columns = synthesize_column_fpn(
            config.width,
            config.height,
            config.fpn_amplitude,
            seed ^ SALT_FPN_COLUMN,
        );
        let smooth = synthesize_smooth_fpn(
            config.width,
            config.height,
            0.4 * config.fpn_amplitude,
            seed ^ SALT_FPN_SMOOTH,
        );
        let offsets = columns
            .offsets()
            .iter()
            .zip(smooth.offsets())
            .map(|(&a, &b)| a + b)
            .collect();
        let fpn = FpnPattern::new(config.width, config.height, offsets)?;
        Ok(Self { scene, trajectory, config, seed, fpn })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// The session's fixed-pattern offsets (identical in every frame).
    pub fn fpn(&self) -> &FpnPattern {
        &self.fpn
    }

    fn gap_containing(&self, t: f64) -> Option<&NucGap> {
        self.config.nuc_gaps.iter().find(|g| g.contains(t))
    }

    /// Camera frame timestamps over the whole trajectory, one per slot,
    /// including slots that fall inside shutter gaps.
    pub fn frame_times(&self) -> Vec<f64> {
        let total = (self.trajectory.duration() * self.config.camera_rate + 1e-9) as usize;
        (0..total).map(|i| i as f64 / self.config.camera_rate).collect()
    }

    /// Renders the frame at `t`: per-pixel ray casting against the scene,
    /// additive shot noise keyed by `(seed, t)`, then the session FPN,
    /// clamped to the 16-bit range. Deterministic for a given `t`.
    pub fn render_frame(&self, t: f64) -> Result<RenderedFrame, SimError> {
        let duration = self.trajectory.duration();
        if !(0.0..=duration).contains(&t) {
            return Err(SimError::OutsideTrajectory { t, duration });
        }
        if let Some(gap) = self.gap_containing(t) {
            return Err(SimError::FrameSuspended { t, start: gap.start, end: gap.end() });
        }
        let pose = self.trajectory.body_pose(t);
        let cam_pose = self.camera().camera_to_world(&pose);
        let origin = cam_pose.translation.vector;
        let rot = cam_pose.rotation;

        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.seed);
        noise_rng.set_stream(t.to_bits());
        let shot = if self.config.shot_noise_sigma > 0.0 {
            Some(Normal::new(0.0, self.config.shot_noise_sigma).expect("validated sigma"))
        } else {
            None
        };

        let mut image = RadiometricImage::from_fn(
            self.config.width,
            self.config.height,
            t,
            |x, y| {
                let dir_cam = self.camera().unproject(Vector2::new(x as f64, y as f64));
                let dir = rot * dir_cam;
                let mut v = self.scene.radiance(&origin, &dir);
                if let Some(n) = &shot {
                    v += n.sample(&mut noise_rng);
                }
                v
            },
        )?;
        image = apply_fpn(&image, &self.fpn)?;
        Ok(RenderedFrame { image, state: self.trajectory.state(t) })
    }

    fn camera(&self) -> &CameraModel {
        &self.config.camera
    }
}

/// Noise-free plus noisy inertial channels for one sequence: the measurement
/// series and the ground-truth bias value at each sample.
#[derive(Debug, Clone)]
pub struct ImuSynthesis {
    pub series: ImuSeries,
    pub bias_accel: Vec<Vector3<f64>>,
    pub bias_gyro: Vec<Vector3<f64>>,
}

/// Samples the trajectory at the configured IMU rate over its full duration.
///
/// Gyro measurements are the exact body angular velocity plus bias plus
/// white noise; accelerometer measurements are the specific force
/// `R^T (p_ddot - g_phys)` with `g_phys = -noise.gravity_vector()` (gravity
/// physically points down while the convention vector points up). Biases
/// start at zero and follow per-axis random walks.
pub fn synthesize_imu(
    trajectory: &Trajectory,
    config: &SimConfig,
    seed: u64,
) -> Result<ImuSynthesis, SimError> {
    config.validate()?;
    let dt = 1.0 / config.imu_rate;
    let count = (trajectory.duration() * config.imu_rate + 1e-9) as usize + 1;
    let g_phys = -config.noise.gravity_vector();

    let stream_rng = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    };
    let mut gyro_rng = stream_rng(STREAM_GYRO_NOISE);
    let mut accel_rng = stream_rng(STREAM_ACCEL_NOISE);
    let mut gyro_walk_rng = stream_rng(STREAM_GYRO_WALK);
    let mut accel_walk_rng = stream_rng(STREAM_ACCEL_WALK);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // Discrete white-noise sigma for a density sampled at 1/dt Hz.
    let gyro_sigma = config.noise.gyro_noise_density / dt.sqrt();
    let accel_sigma = config.noise.accel_noise_density / dt.sqrt();
    let gyro_step = config.noise.gyro_bias_walk * dt.sqrt();
    let accel_step = config.noise.accel_bias_walk * dt.sqrt();

    let draw3 = |rng: &mut ChaCha8Rng, sigma: f64| {
        if sigma == 0.0 {
            Vector3::zeros()
        } else {
            Vector3::new(
                sigma * unit.sample(rng),
                sigma * unit.sample(rng),
                sigma * unit.sample(rng),
            )
        }
    };

    let mut bias_gyro = Vector3::zeros();
    let mut bias_accel = Vector3::zeros();
    let mut samples = Vec::with_capacity(count);
    let mut gyro_biases = Vec::with_capacity(count);
    let mut accel_biases = Vec::with_capacity(count);
    for j in 0..count {
        let t = j as f64 * dt;
        let rot = trajectory.orientation(t);
        let omega = trajectory.angular_velocity_body(t);
        let specific_force = rot.inverse() * (trajectory.acceleration(t) - g_phys);
        samples.push(ImuSample {
            timestamp: t,
            gyro: omega + bias_gyro + draw3(&mut gyro_rng, gyro_sigma),
            accel: specific_force + bias_accel + draw3(&mut accel_rng, accel_sigma),
        });
        gyro_biases.push(bias_gyro);
        accel_biases.push(bias_accel);
        bias_gyro += draw3(&mut gyro_walk_rng, gyro_step);
        bias_accel += draw3(&mut accel_walk_rng, accel_step);
    }
    Ok(ImuSynthesis {
        series: ImuSeries::new(samples)?,
        bias_accel: accel_biases,
        bias_gyro: gyro_biases,
    })
}

/// Per-run counts reported by [`generate_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSummary {
    pub frames_total: usize,
    pub frames_written: usize,
    pub frames_suspended: usize,
    pub imu_samples: usize,
}

/// Renders and writes a complete dataset: `frame_%06d.pgm` plus
/// `frames.csv` (gap slots skipped), `imu.csv` spanning the full duration,
/// `groundtruth.txt` in TUM format at every camera slot, and a
/// `sim_manifest` key-value file recording the generation parameters.
pub fn generate_sequence(
    scene: SceneModel,
    trajectory: Trajectory,
    config: SimConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<SequenceSummary, SimError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let session = SimSession::new(scene, trajectory, config, seed)?;
    let times = session.frame_times();

    let mut entries = Vec::new();
    let mut groundtruth = Vec::with_capacity(times.len());
    let mut suspended = 0usize;
    for (slot, &t) in times.iter().enumerate() {
        groundtruth.push(TimedPose::new(t, session.trajectory().body_pose(t)));
        match session.render_frame(t) {
            Ok(frame) => {
                let filename = format!("frame_{slot:06}.pgm");
                write_pgm16(&out_dir.join(&filename), &frame.image)?;
                entries.push(FrameEntry { timestamp: t, filename });
            }
            Err(SimError::FrameSuspended { .. }) => suspended += 1,
            Err(e) => return Err(e),
        }
    }
    write_frames_csv(&out_dir.join("frames.csv"), &entries)?;
    write_tum(&out_dir.join("groundtruth.txt"), &groundtruth)?;

    let imu = synthesize_imu(session.trajectory(), session.config(), seed)?;
    write_imu_csv(&out_dir.join("imu.csv"), &imu.series)?;

    let summary = SequenceSummary {
        frames_total: times.len(),
        frames_written: entries.len(),
        frames_suspended: suspended,
        imu_samples: imu.series.samples().len(),
    };
    write_sim_manifest(&out_dir.join("sim_manifest"), &session, seed, &summary)?;
    Ok(summary)
}

fn write_sim_manifest(
    path: &Path,
    session: &SimSession,
    seed: u64,
    summary: &SequenceSummary,
) -> Result<(), SimError> {
    use std::fmt::Write as _;
    let cfg = session.config();
    let mut text = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(text, "{k}={v}");
    };
    kv("seed", seed.to_string());
    kv("duration_s", session.trajectory().duration().to_string());
    kv("camera_rate_hz", cfg.camera_rate.to_string());
    kv("imu_rate_hz", cfg.imu_rate.to_string());
    kv("width", cfg.width.to_string());
    kv("height", cfg.height.to_string());
    kv("fx", cfg.camera.fx.to_string());
    kv("fy", cfg.camera.fy.to_string());
    kv("cx", cfg.camera.cx.to_string());
    kv("cy", cfg.camera.cy.to_string());
    kv("fpn_amplitude", cfg.fpn_amplitude.to_string());
    kv("shot_noise_sigma", cfg.shot_noise_sigma.to_string());
    kv("gyro_noise_density", cfg.noise.gyro_noise_density.to_string());
    kv("accel_noise_density", cfg.noise.accel_noise_density.to_string());
    kv("gyro_bias_walk", cfg.noise.gyro_bias_walk.to_string());
    kv("accel_bias_walk", cfg.noise.accel_bias_walk.to_string());
    kv("gravity_magnitude", cfg.noise.gravity_magnitude.to_string());
    let gaps = cfg
        .nuc_gaps
        .iter()
        .map(|g| format!("{}:{}", g.start, g.duration))
        .collect::<Vec<_>>()
        .join(";");
    kv("nuc_gaps", gaps);
    kv("scene_planes", session.scene.planes.len().to_string());
    kv("scene_ambient", session.scene.ambient.to_string());
    kv("frames_total", summary.frames_total.to_string());
    kv("frames_written", summary.frames_written.to_string());
    kv("frames_suspended", summary.frames_suspended.to_string());
    kv("imu_samples", summary.imu_samples.to_string());
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Bounds for the random homography sampler. All magnitudes are maximum
/// absolute deviations from the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMagnitudes {
    /// Rotation about the image center, rad.
    pub rotation: f64,
    /// Isotropic scale deviation: scale drawn from [1-s, 1+s].
    pub scale: f64,
    /// Projective row entries, per pixel.
    pub perspective: f64,
    /// Translation, pixels.
    pub translation: f64,
}

impl HomographyMagnitudes {
    pub fn zero() -> Self {
        Self { rotation: 0.0, scale: 0.0, perspective: 0.0, translation: 0.0 }
    }
}

impl Default for HomographyMagnitudes {
    fn default() -> Self {
        Self { rotation: 0.25, scale: 0.15, perspective: 1.2e-4, translation: 12.0 }
    }
}

/// Homography composed about `center`: translate so the center is the
/// origin, scale, rotate, apply the projective row, translate back plus
/// the pixel offset. Zero arguments give the exact identity.
pub fn homography_about_center(
    rotation: f64,
    scale: f64,
    perspective: (f64, f64),
    translation: (f64, f64),
    center: (f64, f64),
) -> Result<Homography, HomographyError> {
    let to_origin = Matrix3::new(1.0, 0.0, -center.0, 0.0, 1.0, -center.1, 0.0, 0.0, 1.0);
    let (s, c) = rotation.sin_cos();
    let rot_scale = Matrix3::new(
        scale * c,
        -scale * s,
        0.0,
        scale * s,
        scale * c,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let projective = Matrix3::new(
        1.0,
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        perspective.0,
        perspective.1,
        1.0,
    );
    let back = Matrix3::new(
        1.0,
        0.0,
        center.0 + translation.0,
        0.0,
        1.0,
        center.1 + translation.1,
        0.0,
        0.0,
        1.0,
    );
    Homography::from_matrix(back * projective * rot_scale * to_origin)
}

/// A reference image, its warped counterpart, and the exact pixel map
/// taking reference coordinates onto warped coordinates.
#[derive(Debug, Clone)]
pub struct HomographyPair {
    pub reference: RadiometricImage,
    pub warped: RadiometricImage,
    pub map: Homography,
}

/// One random warp per corpus image, resampling degenerate draws. Vacated
/// pixels are filled with the image mean. When `augment` is given, the
/// warped image is additionally photometrically corrupted.
pub fn generate_homography_pairs(
    corpus: &[RadiometricImage],
    magnitudes: &HomographyMagnitudes,
    seed: u64,
    augment: Option<&AugmentationConfig>,
) -> Result<Vec<HomographyPair>, SimError> {
    if corpus.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    if let Some(cfg) = augment {
        cfg.validate()?;
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    for (index, image) in corpus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + index as u64);
        let center = (
            (image.width() - 1) as f64 / 2.0,
            (image.height() - 1) as f64 / 2.0,
        );
        let mut sym = |m: f64| if m == 0.0 { 0.0 } else { rng.gen_range(-m..=m) };
        const MAX_ATTEMPTS: usize = 32;
        let mut map = None;
        for _ in 0..MAX_ATTEMPTS {
            let rotation = sym(magnitudes.rotation);
            let scale = 1.0 + sym(magnitudes.scale);
            let perspective = (sym(magnitudes.perspective), sym(magnitudes.perspective));
            let translation = (sym(magnitudes.translation), sym(magnitudes.translation));
            match homography_about_center(rotation, scale, perspective, translation, center) {
                Ok(h) if h.matrix().determinant().abs() >= 1e-6 => {
                    map = Some(h);
                    break;
                }
                _ => continue,
            }
        }
        let map = map.ok_or(SimError::DegenerateHomography { attempts: MAX_ATTEMPTS })?;
        let mut warped = image.warp(&map, image.mean());
        if let Some(cfg) = augment {
            warped = photometric_augment(&warped, cfg, seed ^ (index as u64).wrapping_mul(0x9E37));
        }
        pairs.push(HomographyPair { reference: image.clone(), warped, map });
    }
    Ok(pairs)
}
