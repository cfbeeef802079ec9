//! Synthetic stereo scenes, tracked observations with outliers, smooth
//! trajectories with bounded acceleration, and IMU streams.
//!
//! Every generator is a pure function of `(SimConfig, rng)`; identical
//! inputs produce bit-identical outputs.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ImuSample;
use crate::geometry::{backproject, project, rot_rp, rot_rp_deriv, rot_yaw, rot_yaw_deriv, Pose4, StereoRig};
use crate::stereo::Correspondence;

/// Standard gravity magnitude (m/s^2).
pub const GRAVITY: f64 = 9.81;

/// Length of one quasi-static + burst motion cycle (s).
pub const MOTION_CYCLE: f64 = 10.0;

/// Parameters of the synthetic experiments.
///
/// Defaults reproduce the simulated rig: f = 1100 px, 800x800 images,
/// 0.2 m rectified baseline, depths 1-10 m, 2.5 px image noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Focal length (px).
    pub focal: f64,
    /// Image width (px).
    pub width: f64,
    /// Image height (px).
    pub height: f64,
    /// Right camera center in the left camera frame (m); rotation is identity.
    pub baseline: [f64; 3],
    pub depth_min: f64,
    pub depth_max: f64,
    /// Image noise standard deviation (px) on keyframe observations.
    pub sigma_px: f64,
    /// Also perturb the current-frame observation with image noise.
    pub current_noise: bool,
    /// Fraction of correspondences whose current-frame match is replaced.
    pub outlier_ratio: f64,
    /// Points per frame.
    pub n_points: usize,
    pub seed: u64,
    /// Standard deviation of the roll/pitch prior handed to the estimators (deg).
    pub rp_prior_noise_deg: f64,
    /// Relative-pose sampling ranges for single-frame experiments.
    pub max_yaw_deg: f64,
    pub max_tilt_deg: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Camera rate (Hz).
    pub camera_rate: f64,
    /// IMU rate (Hz).
    pub imu_rate: f64,
    /// Gyro white-noise density (rad/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Gyro bias random-walk density (rad/s/sqrt(s)); Var[b(t)] = density^2 t.
    pub gyro_bias_walk: f64,
    /// Per-axis standard deviation of the initial gyro bias (rad/s).
    pub gyro_bias_init: f64,
    /// Accelerometer white-noise density (m/s^2/sqrt(Hz)).
    pub accel_noise_density: f64,
    /// Upper bound on the non-gravitational acceleration (m/s^2).
    pub accel_bound: f64,
    /// Trajectory duration (s).
    pub duration: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            focal: 1100.0,
            width: 800.0,
            height: 800.0,
            baseline: [0.2, 0.0, 0.0],
            depth_min: 1.0,
            depth_max: 10.0,
            sigma_px: 2.5,
            current_noise: false,
            outlier_ratio: 0.0,
            n_points: 100,
            seed: 0,
            rp_prior_noise_deg: 0.0,
            max_yaw_deg: 20.0,
            max_tilt_deg: 10.0,
            t_min: 0.1,
            t_max: 0.5,
            camera_rate: 10.0,
            imu_rate: 200.0,
            gyro_noise_density: 1.2e-4,
            gyro_bias_walk: 2e-5,
            gyro_bias_init: 5e-4,
            accel_noise_density: 6e-4,
            accel_bound: 1.0,
            duration: 150.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.focal > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return bad("focal length and image size must be positive");
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad("depth range must be positive and ordered");
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad("outlier_ratio must lie in [0, 1)");
        }
        if !(self.camera_rate > 0.0 && self.imu_rate > 0.0) {
            return bad("rates must be positive");
        }
        if !(self.sigma_px >= 0.0 && self.rp_prior_noise_deg >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.t_min >= 0.0 && self.t_max >= self.t_min) {
            return bad("translation range must be non-negative and ordered");
        }
        if !(self.gyro_noise_density >= 0.0
            && self.gyro_bias_walk >= 0.0
            && self.gyro_bias_init >= 0.0
            && self.accel_noise_density >= 0.0)
        {
            return bad("IMU noise densities must be non-negative");
        }
        if !(self.accel_bound >= 0.0 && self.duration > 0.0) {
            return bad("accel_bound must be non-negative and duration positive");
        }
        if self.n_points < 3 {
            return bad("n_points must be at least 3");
        }
        let ratio = self.imu_rate / self.camera_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("imu_rate must be an integer multiple of camera_rate");
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<StereoRig> {
        StereoRig::from_baseline(
            Rotation3::identity(),
            Vector3::from(self.baseline),
            self.focal,
            self.width,
            self.height,
        )
    }

    /// Image noise in normalized coordinates.
    pub fn sigma(&self) -> f64 {
        self.sigma_px / self.focal
    }

    pub fn imu_per_frame(&self) -> usize {
        (self.imu_rate / self.camera_rate).round() as usize
    }
}

/// One simulated keyframe / current-frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub correspondences: Vec<Correspondence>,
    /// True keyframe-to-current yaw and translation.
    pub pose: Pose4,
    /// True roll-pitch factor of the relative rotation.
    pub r_rp: Rotation3<f64>,
    /// True keyframe-left points.
    pub points: Vec<Vector3<f64>>,
}

impl SyntheticFrame {
    pub fn outlier_count(&self) -> usize {
        self.correspondences
            .iter()
            .filter(|c| c.is_inlier_truth == Some(false))
            .count()
    }
}

fn sample_scene_point<R: Rng + ?Sized>(cfg: &SimConfig, rig: &StereoRig, rng: &mut R) -> Vector3<f64> {
    let (hx, hy) = rig.half_fov();
    loop {
        let depth = rng.random_range(cfg.depth_min..=cfg.depth_max);
        let uv = Vector2::new(rng.random_range(-hx..=hx), rng.random_range(-hy..=hy));
        let p = backproject(&uv, depth);
        if let Ok(y) = project(&rig.extrinsic.transform_point(&p)) {
            if rig.in_image(&y) {
                return p;
            }
        }
    }
}

/// Points with depth uniform in the configured range and pixel position
/// uniform in the left image, kept only if the right camera also sees them.
pub fn gen_scene<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Vec<Vector3<f64>>> {
    let rig = cfg.rig()?;
    Ok((0..cfg.n_points).map(|_| sample_scene_point(cfg, &rig, rng)).collect())
}

/// Random keyframe-to-current relative pose (yaw, roll/pitch, translation)
/// within the configured ranges, rejected until the center of the scene stays
/// well inside the current image.
pub fn sample_relative_pose<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Pose4, Rotation3<f64>)> {
    let rig = cfg.rig()?;
    let (hx, hy) = rig.half_fov();
    let mid = Vector3::new(0.0, 0.0, 0.5 * (cfg.depth_min + cfg.depth_max));
    let yaw_max = cfg.max_yaw_deg.to_radians();
    let tilt_max = cfg.max_tilt_deg.to_radians();
    for _ in 0..10_000 {
        let yaw = if yaw_max > 0.0 {
            rng.random_range(-yaw_max..=yaw_max)
        } else {
            0.0
        };
        let (pitch, roll) = if tilt_max > 0.0 {
            (
                rng.random_range(-tilt_max..=tilt_max),
                rng.random_range(-tilt_max..=tilt_max),
            )
        } else {
            (0.0, 0.0)
        };
        let dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let mag = rng.random_range(cfg.t_min..=cfg.t_max);
        let t = dir.normalize() * mag;
        let pose = Pose4::new(yaw, t);
        let r_rp = rot_rp(pitch, roll);
        let se3 = pose.to_se3(&r_rp);
        if let Ok(c) = project(&se3.transform_point(&mid)) {
            if c.x.abs() < 0.5 * hx && c.y.abs() < 0.5 * hy {
                return Ok((pose, r_rp));
            }
        }
    }
    Err(Error::Config(
        "could not sample a relative pose keeping the scene visible".into(),
    ))
}

/// Project `points` into the keyframe stereo pair and the current frame,
/// add image noise and replace a fixed fraction of current-frame matches by
/// uniformly drawn image points.
///
/// Points that leave any field of view are replaced by fresh scene points,
/// so the output always has `points.len()` correspondences.
pub fn synth_observations<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<SyntheticFrame> {
    let rig = cfg.rig()?;
    let se3 = pose.to_se3(r_rp);
    let sigma = cfg.sigma();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut kept = Vec::with_capacity(points.len());
    let mut corrs = Vec::with_capacity(points.len());
    for &p0 in points {
        let mut p = p0;
        let (q, z, y) = loop {
            let seen = (|| {
                let z = project(&p).ok()?;
                let y = project(&rig.extrinsic.transform_point(&p)).ok()?;
                let q = project(&se3.transform_point(&p)).ok()?;
                (rig.in_image(&z) && rig.in_image(&y) && rig.in_image(&q)).then_some((q, z, y))
            })();
            match seen {
                Some(obs) => break obs,
                None => p = sample_scene_point(cfg, &rig, rng),
            }
        };
        kept.push(p);
        let mut c = Correspondence::new(q, z, y);
        c.is_inlier_truth = Some(true);
        corrs.push(c);
    }
    for c in corrs.iter_mut() {
        let mut jitter = || Vector2::new(noise.sample(rng), noise.sample(rng));
        c.z += jitter();
        c.y += jitter();
        if cfg.current_noise {
            c.q += jitter();
        }
    }
    let n_out = (cfg.outlier_ratio * points.len() as f64).round() as usize;
    if n_out > 0 {
        let (hx, hy) = rig.half_fov();
        for i in index::sample(rng, points.len(), n_out.min(points.len())).into_iter() {
            let c = &mut corrs[i];
            c.q = Vector2::new(rng.random_range(-hx..=hx), rng.random_range(-hy..=hy));
            c.is_inlier_truth = Some(false);
        }
    }
    Ok(SyntheticFrame {
        correspondences: corrs,
        pose: *pose,
        r_rp: *r_rp,
        points: kept,
    })
}

/// Relative pose, scene and observations in one call.
pub fn gen_frame<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SyntheticFrame> {
    let (pose, r_rp) = sample_relative_pose(cfg, rng)?;
    let points = gen_scene(cfg, rng)?;
    synth_observations(&points, &pose, &r_rp, cfg, rng)
}

/// Perturb a roll-pitch factor by Gaussian angle noise of `std_deg` degrees.
pub fn perturb_rp<R: Rng + ?Sized>(r_rp: &Rotation3<f64>, std_deg: f64, rng: &mut R) -> Result<Rotation3<f64>> {
    if std_deg == 0.0 {
        return Ok(*r_rp);
    }
    let e = crate::geometry::factor_yaw_rollpitch(r_rp)?;
    let s = std_deg.to_radians();
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    Ok(rot_rp(e.pitch + s * n1, e.roll + s * n2))
}

/// Ground-truth kinematic state at one IMU instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Non-gravitational acceleration, world frame (z up).
    pub accel: Vector3<f64>,
    /// Body-to-world attitude `R_yaw(yaw) * R_rp(pitch, roll)`.
    pub attitude: Rotation3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Angular rate in the body frame.
    pub omega: Vector3<f64>,
    /// Specific force in the body frame.
    pub specific_force: Vector3<f64>,
}

/// Densely sampled ground-truth trajectory at the IMU rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub imu_rate: f64,
    /// IMU samples per camera frame.
    pub stride: usize,
}

impl Trajectory {
    /// Indices of IMU samples that coincide with camera frames.
    pub fn camera_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.samples.len()).step_by(self.stride)
    }
}

/// Whether `t` falls in the quasi-static half of its motion cycle.
pub fn is_quasi_static(t: f64) -> bool {
    t.rem_euclid(MOTION_CYCLE) < 0.5 * MOTION_CYCLE
}

fn burst_envelope(t: f64) -> f64 {
    let phase = t.rem_euclid(MOTION_CYCLE);
    let half = 0.5 * MOTION_CYCLE;
    if phase < half {
        0.0
    } else {
        (PI * (phase - half) / half).sin().powi(2)
    }
}

struct Harmonics {
    amp: [[f64; 3]; 3],
    freq: [f64; 3],
    phase: [[f64; 3]; 3],
}

impl Harmonics {
    fn eval(&self, t: f64) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| {
            (0..3)
                .map(|k| self.amp[axis][k] * (2.0 * PI * self.freq[k] * t + self.phase[axis][k]).sin())
                .sum()
        })
    }
}

/// Smooth trajectory alternating quasi-static (constant-velocity) and
/// burst half-cycles of [`MOTION_CYCLE`] seconds.
///
/// Burst accelerations are sums of low-frequency sinusoids under a smooth
/// envelope, scaled so `|a| <= accel_bound` everywhere. Attitude follows slow
/// sinusoidal roll, pitch and yaw profiles.
pub fn gen_trajectory<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Trajectory> {
    cfg.validate()?;
    let freq = [0.3, 0.7, 1.3];
    let mut amp = [[0.0; 3]; 3];
    let mut phase = [[0.0; 3]; 3];
    let per_axis = 0.95 * cfg.accel_bound / 3f64.sqrt();
    for axis in 0..3 {
        let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));
        let total: f64 = raw.iter().sum();
        for k in 0..3 {
            amp[axis][k] = per_axis * raw[k] / total;
            phase[axis][k] = rng.random_range(0.0..2.0 * PI);
        }
    }
    let harmonics = Harmonics { amp, freq, phase };
    let yaw0 = rng.random_range(-PI..PI);
    let att_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));

    // (value, rate) pairs for the attitude profiles.
    let yaw_of = |t: f64| {
        let w = 2.0 * PI * 0.02;
        (
            yaw0 + 0.02 * t + 0.3 * (w * t + att_phase[0]).sin(),
            0.02 + 0.3 * w * (w * t + att_phase[0]).cos(),
        )
    };
    let pitch_of = |t: f64| {
        let w = 2.0 * PI * 0.05;
        (
            0.05 * (w * t + att_phase[1]).sin(),
            0.05 * w * (w * t + att_phase[1]).cos(),
        )
    };
    let roll_of = |t: f64| {
        let w = 2.0 * PI * 0.037;
        (
            0.06 * (w * t + att_phase[2]).sin(),
            0.06 * w * (w * t + att_phase[2]).cos(),
        )
    };

    let dt = 1.0 / cfg.imu_rate;
    let count = (cfg.duration * cfg.imu_rate).round() as usize;
    let mut samples = Vec::with_capacity(count);
    let mut position = Vector3::zeros();
    let mut velocity = Vector3::new(0.3, 0.1, 0.0);
    let gravity_up = Vector3::new(0.0, 0.0, GRAVITY);
    for k in 0..count {
        let t = k as f64 * dt;
        let accel = harmonics.eval(t) * burst_envelope(t);
        let (yaw, yaw_rate) = yaw_of(t);
        let (pitch, pitch_rate) = pitch_of(t);
        let (roll, roll_rate) = roll_of(t);
        let ry = rot_yaw(yaw);
        let rrp = rot_rp(pitch, roll);
        let attitude = ry * rrp;
        let (d_pitch, d_roll) = rot_rp_deriv(pitch, roll);
        let c_dot: Matrix3<f64> =
            rot_yaw_deriv(yaw) * rrp.matrix() * yaw_rate + ry.matrix() * (d_pitch * pitch_rate + d_roll * roll_rate);
        let omega_skew = attitude.matrix().transpose() * c_dot;
        let omega = Vector3::new(
            0.5 * (omega_skew[(2, 1)] - omega_skew[(1, 2)]),
            0.5 * (omega_skew[(0, 2)] - omega_skew[(2, 0)]),
            0.5 * (omega_skew[(1, 0)] - omega_skew[(0, 1)]),
        );
        let specific_force = attitude.inverse() * (accel + gravity_up);
        samples.push(TrajectorySample {
            time: t,
            position,
            velocity,
            accel,
            attitude,
            yaw,
            pitch,
            roll,
            omega,
            specific_force,
        });
        let next_accel = harmonics.eval(t + dt) * burst_envelope(t + dt);
        let next_velocity = velocity + (accel + next_accel) * (0.5 * dt);
        position += (velocity + next_velocity) * (0.5 * dt);
        velocity = next_velocity;
    }
    Ok(Trajectory {
        samples,
        imu_rate: cfg.imu_rate,
        stride: cfg.imu_per_frame(),
    })
}

/// Noisy IMU measurements together with the ground truth they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    /// True gyro bias at each sample.
    pub gyro_bias: Vec<Vector3<f64>>,
    pub true_omega: Vec<Vector3<f64>>,
    pub true_specific_force: Vec<Vector3<f64>>,
    pub true_attitude: Vec<Rotation3<f64>>,
}

/// Gyro = true rate + random-walk bias + white noise; accel = true specific
/// force + white noise.
pub fn synth_imu<R: Rng + ?Sized>(traj: &Trajectory, cfg: &SimConfig, rng: &mut R) -> Result<ImuStream> {
    let dt = 1.0 / traj.imu_rate;
    let gyro_sd = cfg.gyro_noise_density * traj.imu_rate.sqrt();
    let accel_sd = cfg.accel_noise_density * traj.imu_rate.sqrt();
    let walk_sd = cfg.gyro_bias_walk * dt.sqrt();
    let mut gauss = |sd: f64| -> Vector3<f64> {
        if sd == 0.0 {
            Vector3::zeros()
        } else {
            Vector3::from_fn(|_, _| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        }
    };
    let mut bias = gauss(cfg.gyro_bias_init);
    let n = traj.samples.len();
    let mut out = ImuStream {
        samples: Vec::with_capacity(n),
        gyro_bias: Vec::with_capacity(n),
        true_omega: Vec::with_capacity(n),
        true_specific_force: Vec::with_capacity(n),
        true_attitude: Vec::with_capacity(n),
    };
    for (k, s) in traj.samples.iter().enumerate() {
        if k > 0 {
            bias += gauss(walk_sd);
        }
        let gyro = s.omega + bias + gauss(gyro_sd);
        let accel = s.specific_force + gauss(accel_sd);
        out.samples.push(ImuSample {
            time: s.time,
            gyro,
            accel,
        });
        out.gyro_bias.push(bias);
        out.true_omega.push(s.omega);
        out.true_specific_force.push(s.specific_force);
        out.true_attitude.push(s.attitude);
    }
    Ok(out)
}
