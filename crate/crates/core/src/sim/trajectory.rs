//! Analytic rigid-body trajectories with exact derivatives.
//!
//! Position and ZYX Euler orientation channels are closed-form functions of
//! a warped time `s(t)`. The warp holds the body exactly still during a
//! lead-in interval, then ramps the pace from 0 to 1 with a quintic profile,
//! keeping everything C^2: velocities, accelerations, and body angular
//! rates are analytic everywhere, which is what makes the synthesized IMU
//! exactly consistent with the rendered poses.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

use crate::imu::FrameState;

/// One closed-form term of a channel, as a function of warped time s.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Constant(f64),
    /// slope * s
    Linear(f64),
    /// amp * cos(freq * s + phase)
    Cosine { amp: f64, freq: f64, phase: f64 },
}

impl Term {
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            Term::Constant(a) => (a, 0.0, 0.0),
            Term::Linear(a) => (a * s, a, 0.0),
            Term::Cosine { amp, freq, phase } => {
                let arg = freq * s + phase;
                (
                    amp * arg.cos(),
                    -amp * freq * arg.sin(),
                    -amp * freq * freq * arg.cos(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Channel {
    terms: Vec<Term>,
}

impl Channel {
    fn constant(a: f64) -> Self {
        Self { terms: vec![Term::Constant(a)] }
    }

    /// Value and first two derivatives with respect to warped time.
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for t in &self.terms {
            let (f, d1, d2) = t.eval(s);
            out.0 += f;
            out.1 += d1;
            out.2 += d2;
        }
        out
    }
}

/// Quintic-ramp time warp: s = 0 for `t <= lead_in`, then pace rises
/// C^2-smoothly to 1 over `ramp` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeWarp {
    lead_in: f64,
    ramp: f64,
}

impl TimeWarp {
    /// Returns (s, ds/dt, d2s/dt2).
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        if t <= self.lead_in {
            return (0.0, 0.0, 0.0);
        }
        let rel = t - self.lead_in;
        if self.ramp > 0.0 && rel < self.ramp {
            let u = rel / self.ramp;
            // Pace profile 6u^5 - 15u^4 + 10u^3 (zero value/slope at ends of
            // its derivative), integrated in closed form for s itself.
            let pace = ((6.0 * u - 15.0) * u + 10.0) * u * u * u;
            let s = self.ramp * (((u - 3.0) * u + 2.5) * u * u * u * u);
            let dpace = 30.0 * u * u * (u - 1.0) * (u - 1.0) / self.ramp;
            (s, pace, dpace)
        } else {
            (rel - 0.5 * self.ramp, 1.0, 0.0)
        }
    }
}

/// A C^2 rigid-body motion with analytic derivatives. Orientation is
/// ZYX Euler (yaw about world z, then pitch, then roll), body-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    duration: f64,
    warp: TimeWarp,
    // x, y, z, roll, pitch, yaw as functions of warped time.
    position: [Channel; 3],
    attitude: [Channel; 3],
}

/// Parameters of [`Trajectory::circular_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct CircularLoopParams {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Seconds per lap once at full pace.
    pub lap_time: f64,
    /// Stationary interval before any motion, seconds.
    pub lead_in: f64,
    /// Pace ramp duration after the lead-in, seconds.
    pub ramp: f64,
    pub duration: f64,
    /// Vertical oscillation amplitude, m.
    pub bob_amplitude: f64,
    /// Vertical oscillation frequency, rad per warped second.
    pub bob_frequency: f64,
    /// Peak roll and pitch excursions, rad.
    pub roll_wobble: f64,
    pub pitch_wobble: f64,
    /// Wobble frequency, rad per warped second.
    pub wobble_frequency: f64,
}

impl Default for CircularLoopParams {
    fn default() -> Self {
        Self {
            center: Vector3::zeros(),
            radius: 6.4,
            lap_time: 60.0,
            lead_in: 1.0,
            ramp: 2.0,
            duration: 62.0,
            bob_amplitude: 0.08,
            bob_frequency: 0.9,
            roll_wobble: 0.03,
            pitch_wobble: 0.04,
            wobble_frequency: 0.7,
        }
    }
}

impl Trajectory {
    /// Rest at a fixed pose for the whole duration.
    pub fn stationary(duration: f64, position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            duration,
            warp: TimeWarp { lead_in: duration, ramp: 0.0 },
            position: [
                Channel::constant(position.x),
                Channel::constant(position.y),
                Channel::constant(position.z),
            ],
            attitude: [Channel::constant(0.0), Channel::constant(0.0), Channel::constant(yaw)],
        }
    }

    /// A level counter-clockwise loop with the heading following the path
    /// tangent, small vertical bobbing, and gentle roll/pitch wobble. Starts
    /// exactly stationary for `lead_in` seconds.
    pub fn circular_loop(p: CircularLoopParams) -> Self {
        let k = std::f64::consts::TAU / p.lap_time;
        let phase0 = -std::f64::consts::FRAC_PI_2;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let position = [
            Channel {
                terms: vec![
                    Term::Constant(p.center.x),
                    Term::Cosine { amp: p.radius, freq: k, phase: phase0 },
                ],
            },
            Channel {
                // sin(x) = cos(x - pi/2)
                terms: vec![
                    Term::Constant(p.center.y),
                    Term::Cosine { amp: p.radius, freq: k, phase: phase0 - half_pi },
                ],
            },
            Channel {
                terms: vec![
                    Term::Constant(p.center.z),
                    Term::Cosine {
                        amp: p.bob_amplitude,
                        freq: p.bob_frequency,
                        phase: -half_pi,
                    },
                ],
            },
        ];
        let attitude = [
            Channel {
                terms: vec![Term::Cosine {
                    amp: p.roll_wobble,
                    freq: p.wobble_frequency,
                    phase: 0.7 - half_pi,
                }],
            },
            Channel {
                terms: vec![Term::Cosine {
                    amp: p.pitch_wobble,
                    freq: 0.8 * p.wobble_frequency,
                    phase: 1.3 - half_pi,
                }],
            },
            Channel {
                // Tangent heading of a CCW circle: path angle + pi/2.
                terms: vec![Term::Constant(phase0 + half_pi), Term::Linear(k)],
            },
        ];
        Self {
            duration: p.duration,
            warp: TimeWarp { lead_in: p.lead_in, ramp: p.ramp },
            position,
            attitude,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    fn kinematics(&self, t: f64) -> ([(f64, f64, f64); 3], [(f64, f64, f64); 3]) {
        let (s, sd, sdd) = self.warp.eval(t);
        let chain = |c: &Channel| {
            let (f, d1, d2) = c.eval(s);
            (f, d1 * sd, d2 * sd * sd + d1 * sdd)
        };
        (
            [chain(&self.position[0]), chain(&self.position[1]), chain(&self.position[2])],
            [chain(&self.attitude[0]), chain(&self.attitude[1]), chain(&self.attitude[2])],
        )
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let (p, _) = self.kinematics(t);
        Vector3::new(p[0].0, p[1].0, p[2].0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let (p, _) = self.kinematics(t);
        Vector3::new(p[0].1, p[1].1, p[2].1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let (p, _) = self.kinematics(t);
        Vector3::new(p[0].2, p[1].2, p[2].2)
    }

    /// Body-to-world rotation.
    pub fn orientation(&self, t: f64) -> UnitQuaternion<f64> {
        let (_, e) = self.kinematics(t);
        UnitQuaternion::from_euler_angles(e[0].0, e[1].0, e[2].0)
    }

    /// Exact body-frame angular velocity from the ZYX Euler rates.
    pub fn angular_velocity_body(&self, t: f64) -> Vector3<f64> {
        let (_, e) = self.kinematics(t);
        let (roll, droll) = (e[0].0, e[0].1);
        let (pitch, dpitch) = (e[1].0, e[1].1);
        let dyaw = e[2].1;
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        Vector3::new(
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        )
    }

    pub fn body_pose(&self, t: f64) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position(t)), self.orientation(t))
    }

    /// Ground-truth navigation state (zero biases).
    pub fn state(&self, t: f64) -> FrameState {
        FrameState {
            position: self.position(t),
            velocity: self.velocity(t),
            orientation: self.orientation(t),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            timestamp: t,
        }
    }
}
