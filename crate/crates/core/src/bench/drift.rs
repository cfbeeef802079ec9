//! Long-horizon tracking with the gravity-prior fusion on a simulated
//! trajectory: per-frame attitude and position errors and the adapted
//! accelerometer covariance.

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector3};
use rand::Rng;
use rayon::prelude::*;

use super::table::McResult;
use super::{rmse, trial_rng};
use crate::consensus::{ransac_4dof, RansacParams};
use crate::error::{Error, Result};
use crate::fusion::{
    bcd_solve, gyro_increment, normalize_accel, propagate_attitude, BcdOptions, FusionState, GravityVector, ImuSample,
    Tilt, TiltPrior, WishartPrior,
};
use crate::geometry::{factor_yaw_rollpitch, homogeneous, project, rot_rp, rot_yaw, wrap_angle, EulerYRP, Pose4};
use crate::pnp4dof::{estimate_be, gn_refine, triangulate_all};
use crate::sim::{gen_scene, gen_trajectory, is_quasi_static, synth_imu, synth_observations, SimConfig, GRAVITY};
use crate::stereo::{estimate_noise_variance, Correspondence};

pub const DRIFT_COLUMNS: [&str; 14] = [
    "run",
    "frame",
    "time",
    "quasi_static",
    "accel_norm",
    "roll_err",
    "pitch_err",
    "yaw_err",
    "pos_err",
    "trace_imu_cov",
    "tilt_std",
    "inliers",
    "rounds",
    "degraded",
];

/// Degrees of freedom of the accelerometer covariance prior.
pub const WISHART_DOF: f64 = 10.0;

/// Length of the comparison windows at the start and end of the run (s).
pub const EDGE_WINDOW: f64 = 10.0;

/// Tracked estimate of one camera instant.
#[derive(Debug, Clone, Copy)]
struct Track {
    attitude: EulerYRP,
    position: Vector3<f64>,
    tilt_cov: Matrix2<f64>,
}

/// Tilt whose gravity direction matches a unit body vector.
fn tilt_from_gravity(u: &Vector3<f64>) -> Tilt {
    // u = R_rp^T e3 is the third row of R_rp.
    Tilt::new(-u.x.clamp(-1.0, 1.0).asin(), (-u.y).atan2(u.z))
}

/// Express current-frame observations in the gravity-levelled current frame so
/// the 4-DOF model `R_yaw * R_rp(keyframe)` applies.
fn levelled(corrs: &[Correspondence], current: &Tilt) -> Result<Vec<Correspondence>> {
    let r = current.rotation();
    corrs
        .iter()
        .map(|c| {
            Ok(Correspondence {
                q: project(&(r * homogeneous(&c.q)))?,
                ..*c
            })
        })
        .collect()
}

/// Track a full simulated trajectory frame to frame, each camera frame taking
/// the previous one as keyframe.
///
/// Per frame: gyro propagation of the attitude, 4-DOF estimation (consensus
/// when outliers are configured, then the bias-eliminated solve and one
/// Gauss-Newton step) in gravity-levelled coordinates, then the joint
/// refinement of pose, tilts and accelerometer covariance. The first attitude
/// tilt comes from averaging the first window of accelerometer samples; yaw
/// and position start at the truth.
pub fn run_drift(cfg: &SimConfig, runs: usize, seed: u64) -> Result<McResult> {
    cfg.validate()?;
    let tables: Vec<_> = (0..runs).into_par_iter().map(|r| drift_run(cfg, r, seed)).collect();
    let mut out = McResult::new(&DRIFT_COLUMNS);
    for t in tables {
        out.rows.extend(t?);
    }
    Ok(out)
}

fn drift_run(cfg: &SimConfig, run: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let rig = cfg.rig()?;
    let stream = 3 * run as u64;
    let traj = gen_trajectory(cfg, &mut trial_rng(seed, stream, 0))?;
    let imu = synth_imu(&traj, cfg, &mut trial_rng(seed, stream + 1, 0))?;
    let stride = traj.stride;
    let frames: Vec<usize> = traj.camera_indices().collect();
    if frames.len() < 2 || frames[frames.len() - 1] + 1 > imu.samples.len() {
        return Err(Error::Config("trajectory too short for two camera frames".into()));
    }
    let dt = 1.0 / cfg.imu_rate;
    let g = GravityVector::up();
    let accel_var = (cfg.accel_noise_density * cfg.imu_rate.sqrt() / GRAVITY).powi(2);
    let prior = WishartPrior::from_mode(Matrix3::identity() * accel_var.max(1e-12), WISHART_DOF)?;
    let step_var = (cfg.gyro_noise_density.powi(2) * dt + (cfg.gyro_bias_init * dt).powi(2)).max(1e-16);

    // Static alignment on the first window, each direction carried back to
    // the first body frame with the gyro.
    let first = &imu.samples[..(stride + 1).min(imu.samples.len())];
    let mut to_first = Rotation3::identity();
    let mut sum_dir = Vector3::zeros();
    for (k, s) in first.iter().enumerate() {
        sum_dir += to_first * normalize_accel(&s.accel)?;
        if let Some(next) = first.get(k + 1) {
            to_first *= gyro_increment(&s.gyro, next.time - s.time);
        }
    }
    let tilt0 = tilt_from_gravity(&sum_dir.normalize());
    let truth0 = &traj.samples[0];
    let mut track = Track {
        attitude: EulerYRP {
            yaw: truth0.yaw,
            pitch: tilt0.pitch,
            roll: tilt0.roll,
        },
        position: truth0.position,
        tilt_cov: Matrix2::identity() * (accel_var / first.len() as f64).max(1e-12),
    };

    let mut sigma2 = None;
    let mut rows = Vec::with_capacity(frames.len());
    for (j, pair) in frames.windows(2).enumerate() {
        let (ik, ic) = (pair[0], pair[1]);
        let window: Vec<ImuSample> = imu.samples[ik..=ic].to_vec();
        let truth_k = &traj.samples[ik];
        let truth_c = &traj.samples[ic];
        let mut rng = trial_rng(seed, stream + 2, j as u64);

        // Keyframe-to-current truth and its observations.
        let r_ck = truth_c.attitude.inverse() * truth_k.attitude;
        let t_ck = truth_c.attitude.inverse() * (truth_k.position - truth_c.position);
        let e = factor_yaw_rollpitch(&r_ck)?;
        let points = gen_scene(cfg, &mut rng)?;
        let frame = synth_observations(
            &points,
            &Pose4::new(e.yaw, t_ck),
            &rot_rp(e.pitch, e.roll),
            cfg,
            &mut rng,
        )?;
        let corrs = &frame.correspondences;
        let s2 = match sigma2 {
            Some(v) => v,
            None => {
                let pairs: Vec<_> = corrs.iter().map(|c| (c.z, c.y)).collect();
                let v = estimate_noise_variance(&pairs, &rig)?;
                sigma2 = Some(v);
                v
            }
        };

        let propagated = propagate_attitude(&track.attitude, &window)?;
        let key_tilt = Tilt::of(&propagated[0]);
        let cur_prop = propagated[propagated.len() - 1];
        let cur_tilt = Tilt::of(&cur_prop);
        let key_rp = key_tilt.rotation();
        let flat = levelled(corrs, &cur_tilt)?;
        let inliers: Vec<bool> = if cfg.outlier_ratio > 0.0 {
            let params = RansacParams {
                seed: trial_rng(seed, stream + 2, j as u64).random(),
                ..RansacParams::default()
            };
            ransac_4dof(&flat, &key_rp, &rig, s2, &params)?.inliers
        } else {
            vec![true; corrs.len()]
        };
        let pick = |v: &[Correspondence]| -> Vec<Correspondence> {
            v.iter().zip(&inliers).filter(|(_, &k)| k).map(|(c, _)| *c).collect()
        };
        let flat_in = pick(&flat);
        let corrs_in = pick(corrs);
        let be = estimate_be(&flat_in, &key_rp, &rig, s2)?;
        let pose4 = gn_refine(&be, &key_rp, &flat_in, &rig, 1)?;
        let tris = triangulate_all(&corrs_in, &rig, s2)?;

        let gyro_yaw = wrap_angle(propagated[0].yaw - cur_prop.yaw);
        let span = window[window.len() - 1].time - window[0].time;
        let yaw_var = (window.len() - 1) as f64 * step_var + (cfg.gyro_bias_init * span).powi(2);
        let init = FusionState {
            yaw: wrap_angle(gyro_yaw + wrap_angle(pose4.yaw - gyro_yaw)),
            t: cur_tilt.rotation().inverse() * pose4.t,
            tilts: propagated.iter().map(Tilt::of).collect(),
        };
        let opts = BcdOptions {
            gyro_step_var: step_var,
            yaw_prior: Some((gyro_yaw, yaw_var.max(1e-16))),
            keyframe_prior: Some(TiltPrior {
                mean: key_tilt,
                cov: track.tilt_cov,
            }),
            ..BcdOptions::default()
        };
        let fused = bcd_solve(&init, &corrs_in, &tris, &window, s2, &prior, &g, &opts)?;

        let tilt_c = fused.state.current_tilt();
        let yaw_c = wrap_angle(track.attitude.yaw - fused.state.yaw);
        let att_c: Rotation3<f64> = rot_yaw(yaw_c) * tilt_c.rotation();
        let position = track.position - att_c * fused.state.t;
        let tilt_cov = 0.5 * (fused.current_tilt_cov + fused.current_tilt_cov.transpose());
        track = Track {
            attitude: EulerYRP {
                yaw: yaw_c,
                pitch: tilt_c.pitch,
                roll: tilt_c.roll,
            },
            position,
            tilt_cov: if tilt_cov.iter().all(|v| v.is_finite()) {
                tilt_cov
            } else {
                track.tilt_cov
            },
        };

        let accel_norm = traj.samples[ik..=ic].iter().map(|s| s.accel.norm()).sum::<f64>() / (ic - ik + 1) as f64;
        rows.push(vec![
            run as f64,
            (j + 1) as f64,
            truth_c.time,
            if is_quasi_static(truth_c.time) { 1.0 } else { 0.0 },
            accel_norm,
            wrap_angle(tilt_c.roll - truth_c.roll),
            wrap_angle(tilt_c.pitch - truth_c.pitch),
            wrap_angle(yaw_c - truth_c.yaw),
            (position - truth_c.position).norm(),
            fused.imu_cov.trace(),
            track.tilt_cov.trace().sqrt(),
            corrs_in.len() as f64,
            fused.rounds as f64,
            if fused.degraded { 1.0 } else { 0.0 },
        ]);
    }
    Ok(rows)
}

/// Headline numbers of a drift run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSummary {
    /// Combined roll/pitch RMSE over the first and last windows (rad).
    pub tilt_rmse_first: f64,
    pub tilt_rmse_last: f64,
    pub yaw_rmse_first: f64,
    pub yaw_rmse_last: f64,
    /// Spearman correlation between the covariance trace and the true
    /// acceleration magnitude over all frame windows.
    pub trace_accel_correlation: f64,
    pub windows: usize,
}

/// Summarize run `run` of a table produced by [`run_drift`].
pub fn summarize_drift(series: &McResult, run: usize) -> Result<DriftSummary> {
    let runs = series
        .column("run")
        .ok_or_else(|| Error::Config("missing column run".into()))?;
    let col = |name| -> Result<Vec<f64>> {
        let all = series
            .column(name)
            .ok_or_else(|| Error::Config(format!("missing column {name}")))?;
        Ok(all
            .into_iter()
            .zip(&runs)
            .filter(|(_, &r)| r == run as f64)
            .map(|(v, _)| v)
            .collect())
    };
    let time = col("time")?;
    let roll = col("roll_err")?;
    let pitch = col("pitch_err")?;
    let yaw = col("yaw_err")?;
    let trace = col("trace_imu_cov")?;
    let accel = col("accel_norm")?;
    if time.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let t0 = time[0];
    let t1 = time[time.len() - 1];
    let window = |first: bool| {
        time.iter()
            .enumerate()
            .filter(move |(_, &t)| {
                if first {
                    t < t0 + EDGE_WINDOW
                } else {
                    t > t1 - EDGE_WINDOW
                }
            })
            .map(|(i, _)| i)
    };
    let tilt =
        |first| (rmse(window(first).map(|i| roll[i])).powi(2) + rmse(window(first).map(|i| pitch[i])).powi(2)).sqrt();
    Ok(DriftSummary {
        tilt_rmse_first: tilt(true),
        tilt_rmse_last: tilt(false),
        yaw_rmse_first: rmse(window(true).map(|i| yaw[i])),
        yaw_rmse_last: rmse(window(false).map(|i| yaw[i])),
        trace_accel_correlation: super::spearman(&trace, &accel),
        windows: time.len(),
    })
}
