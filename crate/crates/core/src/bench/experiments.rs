//! Single-frame Monte Carlo studies: estimator accuracy versus point count,
//! consensus under outliers, bound tabulation and noise estimation.

use nalgebra::{Rotation3, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::crlb::crlb_4dof;
use super::fivepoint::{direction_error, ransac_five_point};
use super::table::McResult;
use super::{median, rmse, trial_rng};
use crate::consensus::{ransac_4dof, RansacParams};
use crate::error::{Error, Result};
use crate::geometry::{factor_yaw_rollpitch, project, wrap_angle, Pose4};
use crate::pnp4dof::{estimate_be, estimate_ls, gn_refine, ml_cost};
use crate::sim::{gen_frame, gen_scene, perturb_rp, sample_relative_pose, synth_observations, SimConfig};
use crate::stereo::estimate_noise_variance;

pub const PNP_COLUMNS: [&str; 25] = [
    "n",
    "runs",
    "failures",
    "rmse_yaw_ls",
    "rmse_yaw_be",
    "rmse_yaw_gn",
    "rmse_t_ls",
    "rmse_t_be",
    "rmse_t_gn",
    "rmse_tx_gn",
    "rmse_ty_gn",
    "rmse_tz_gn",
    "bias_ls",
    "bias_be",
    "bias_gn",
    "bias_se_ls",
    "bias_se_be",
    "bias_se_gn",
    "crlb_yaw",
    "crlb_t",
    "crlb_tx",
    "crlb_ty",
    "crlb_tz",
    "gn_cost_reduced",
    "sigma2_est_mean",
];

pub const RANSAC_COLUMNS: [&str; 18] = [
    "outlier_ratio",
    "runs",
    "failures_3pt",
    "failures_5pt",
    "median_yaw_3pt",
    "median_yaw_5pt",
    "rmse_yaw_3pt",
    "rmse_yaw_5pt",
    "median_tdir_3pt",
    "median_tdir_5pt",
    "rmse_tdir_3pt",
    "rmse_tdir_5pt",
    "mean_iterations_3pt",
    "mean_iterations_5pt",
    "recall_3pt",
    "precision_3pt",
    "recall_5pt",
    "precision_5pt",
];

pub const TIMING_COLUMNS: [&str; 4] = [
    "outlier_ratio",
    "median_time_3pt_s",
    "median_time_5pt_s",
    "time_reduction",
];

pub const CRLB_COLUMNS: [&str; 8] = [
    "n", "runs", "failures", "crlb_yaw", "crlb_t", "crlb_tx", "crlb_ty", "crlb_tz",
];

pub const NOISE_COLUMNS: [&str; 6] = ["trial", "n_pairs", "sigma_px", "sigma2_true", "sigma2_est", "rel_error"];

/// Error of an estimate as `(yaw, tx, ty, tz)`.
fn pose_error(est: &Pose4, truth: &Pose4) -> Vector4<f64> {
    let dt = est.t - truth.t;
    Vector4::new(wrap_angle(est.yaw - truth.yaw), dt.x, dt.y, dt.z)
}

struct PnpTrial {
    ls: Vector4<f64>,
    be: Vector4<f64>,
    gn: Vector4<f64>,
    crlb: Vector4<f64>,
    cost_reduced: bool,
    sigma2: f64,
}

/// Norm of the mean error and its standard error.
fn bias(errors: &[Vector4<f64>]) -> (f64, f64) {
    let m = errors.len() as f64;
    let mean: Vector4<f64> = errors.iter().sum::<Vector4<f64>>() / m;
    let var: f64 = errors.iter().map(|e| (e - mean).norm_squared()).sum::<f64>() / (m - 1.0).max(1.0);
    (mean.norm(), (var / m).sqrt())
}

fn pnp_trial(cfg: &SimConfig, pose: &Pose4, r_rp: &Rotation3<f64>, rng: &mut impl Rng) -> Result<PnpTrial> {
    let rig = cfg.rig()?;
    let points = gen_scene(cfg, rng)?;
    let frame = synth_observations(&points, pose, r_rp, cfg, rng)?;
    let prior = perturb_rp(r_rp, cfg.rp_prior_noise_deg, rng)?;
    let pairs: Vec<_> = frame.correspondences.iter().map(|c| (c.z, c.y)).collect();
    let sigma2 = estimate_noise_variance(&pairs, &rig)?;
    let corrs = &frame.correspondences;
    let ls = estimate_ls(corrs, &prior, &rig, sigma2)?;
    let be = estimate_be(corrs, &prior, &rig, sigma2)?;
    let gn = gn_refine(&be, &prior, corrs, &rig, 1)?;
    let cost_reduced = ml_cost(&gn, &prior, corrs, &rig)? < ml_cost(&be, &prior, corrs, &rig)?;
    let crlb = crlb_4dof(&frame.points, pose, r_rp, &rig, cfg.sigma().powi(2))?;
    Ok(PnpTrial {
        ls: pose_error(&ls, pose),
        be: pose_error(&be, pose),
        gn: pose_error(&gn, pose),
        crlb: crlb.diagonal(),
        cost_reduced,
        sigma2,
    })
}

/// The fixed true relative pose used by [`run_mc_pnp`] for `seed`.
pub fn mc_pnp_pose(cfg: &SimConfig, seed: u64) -> Result<(Pose4, Rotation3<f64>)> {
    sample_relative_pose(cfg, &mut trial_rng(seed, u64::MAX, 0))
}

/// LS, bias-eliminated and one-step Gauss-Newton accuracy for each point
/// count in `grid`, against the bound.
///
/// The true relative pose is drawn once from the seed and held fixed so the
/// mean error measures estimator bias; scenes and noise vary per run.
pub fn run_mc_pnp(cfg: &SimConfig, grid: &[usize], runs: usize, seed: u64) -> Result<McResult> {
    cfg.validate()?;
    if grid.iter().any(|&n| n < 3) {
        return Err(Error::Config("point counts must be at least 3".into()));
    }
    let (pose, r_rp) = mc_pnp_pose(cfg, seed)?;
    let mut out = McResult::new(&PNP_COLUMNS);
    for (c, &n) in grid.iter().enumerate() {
        let cfg_n = SimConfig {
            n_points: n,
            ..cfg.clone()
        };
        let trials: Vec<_> = (0..runs)
            .into_par_iter()
            .map(|r| pnp_trial(&cfg_n, &pose, &r_rp, &mut trial_rng(seed, c as u64, r as u64)).ok())
            .collect();
        let ok: Vec<_> = trials.into_iter().flatten().collect();
        let failures = runs - ok.len();
        let pick = |f: fn(&PnpTrial) -> Vector4<f64>| ok.iter().map(f).collect::<Vec<_>>();
        let (ls, be, gn) = (pick(|t| t.ls), pick(|t| t.be), pick(|t| t.gn));
        let yaw = |e: &[Vector4<f64>]| rmse(e.iter().map(|v| v[0]));
        let trans = |e: &[Vector4<f64>]| rmse(e.iter().map(|v| v.fixed_rows::<3>(1).norm()));
        let axis = |e: &[Vector4<f64>], k: usize| rmse(e.iter().map(|v| v[k]));
        let mean_crlb = ok.iter().map(|t| t.crlb).sum::<Vector4<f64>>() / (ok.len().max(1) as f64);
        let (b_ls, se_ls) = bias(&ls);
        let (b_be, se_be) = bias(&be);
        let (b_gn, se_gn) = bias(&gn);
        let m = ok.len().max(1) as f64;
        out.push(vec![
            n as f64,
            runs as f64,
            failures as f64,
            yaw(&ls),
            yaw(&be),
            yaw(&gn),
            trans(&ls),
            trans(&be),
            trans(&gn),
            axis(&gn, 1),
            axis(&gn, 2),
            axis(&gn, 3),
            b_ls,
            b_be,
            b_gn,
            se_ls,
            se_be,
            se_gn,
            mean_crlb[0].sqrt(),
            (mean_crlb[1] + mean_crlb[2] + mean_crlb[3]).sqrt(),
            mean_crlb[1].sqrt(),
            mean_crlb[2].sqrt(),
            mean_crlb[3].sqrt(),
            ok.iter().filter(|t| t.cost_reduced).count() as f64 / m,
            ok.iter().map(|t| t.sigma2).sum::<f64>() / m,
        ]);
    }
    Ok(out)
}

/// Average bound per point count over random scenes and poses.
pub fn run_crlb(cfg: &SimConfig, grid: &[usize], runs: usize, seed: u64) -> Result<McResult> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let sigma2 = cfg.sigma().powi(2);
    let mut out = McResult::new(&CRLB_COLUMNS);
    for (c, &n) in grid.iter().enumerate() {
        let cfg_n = SimConfig {
            n_points: n,
            ..cfg.clone()
        };
        let diag: Vec<_> = (0..runs)
            .into_par_iter()
            .map(|r| {
                let mut rng = trial_rng(seed, c as u64, r as u64);
                let f = gen_frame(&cfg_n, &mut rng).ok()?;
                crlb_4dof(&f.points, &f.pose, &f.r_rp, &rig, sigma2)
                    .ok()
                    .map(|m| m.diagonal())
            })
            .collect();
        let ok: Vec<_> = diag.into_iter().flatten().collect();
        let mean = ok.iter().sum::<Vector4<f64>>() / (ok.len().max(1) as f64);
        out.push(vec![
            n as f64,
            runs as f64,
            (runs - ok.len()) as f64,
            mean[0].sqrt(),
            (mean[1] + mean[2] + mean[3]).sqrt(),
            mean[1].sqrt(),
            mean[2].sqrt(),
            mean[3].sqrt(),
        ]);
    }
    Ok(out)
}

/// Per-trial outcome of the paired 3-point / 5-point comparison.
struct RansacTrial {
    three: Option<(f64, f64, usize, f64, f64, f64)>,
    five: Option<(f64, f64, usize, f64, f64, f64)>,
}

/// Recall and precision of an inlier mask against the simulator labels.
fn label_scores(mask: &[bool], truth: &[Option<bool>]) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (m, t) in mask.iter().zip(truth) {
        match (m, t.unwrap_or(true)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let recall = if tp + fneg > 0 {
        tp as f64 / (tp + fneg) as f64
    } else {
        1.0
    };
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
    (recall, precision)
}

fn ransac_trial(cfg: &SimConfig, rng: &mut impl Rng) -> Result<RansacTrial> {
    let rig = cfg.rig()?;
    let frame = gen_frame(cfg, rng)?;
    let prior = perturb_rp(&frame.r_rp, cfg.rp_prior_noise_deg, rng)?;
    let pairs: Vec<_> = frame.correspondences.iter().map(|c| (c.z, c.y)).collect();
    let sigma2 = estimate_noise_variance(&pairs, &rig)?;
    let threshold = 3.0 * sigma2.sqrt();
    let params = RansacParams {
        threshold: Some(threshold),
        seed: rng.random(),
        ..Default::default()
    };
    let truth_pose = frame.pose.to_se3(&frame.r_rp);
    let labels: Vec<_> = frame.correspondences.iter().map(|c| c.is_inlier_truth).collect();

    let three = ransac_4dof(&frame.correspondences, &prior, &rig, sigma2, &params)
        .ok()
        .map(|res| {
            let (recall, precision) = label_scores(&res.inliers, &labels);
            (
                wrap_angle(res.pose.yaw - frame.pose.yaw).abs(),
                direction_error(&res.pose.t, &frame.pose.t),
                res.iterations,
                res.elapsed.as_secs_f64(),
                recall,
                precision,
            )
        });
    let q: Vec<Vector2<f64>> = frame.correspondences.iter().map(|c| c.q).collect();
    let z: Vec<Vector2<f64>> = frame.correspondences.iter().map(|c| c.z).collect();
    let five = ransac_five_point(&q, &z, threshold, &params).ok().and_then(|res| {
        let yaw = factor_yaw_rollpitch(&res.pose.rotation).ok()?.yaw;
        let (recall, precision) = label_scores(&res.inliers, &labels);
        Some((
            wrap_angle(yaw - frame.pose.yaw).abs(),
            direction_error(&res.pose.translation, &truth_pose.translation),
            res.iterations,
            res.elapsed.as_secs_f64(),
            recall,
            precision,
        ))
    });
    Ok(RansacTrial { three, five })
}

/// Accuracy table plus a separate wall-clock table.
///
/// Timing is kept apart so the accuracy table is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacReport {
    pub accuracy: McResult,
    pub timing: McResult,
}

/// Paired 3-point versus 5-point consensus for each outlier ratio.
pub fn run_mc_ransac(cfg: &SimConfig, rates: &[f64], runs: usize, seed: u64) -> Result<RansacReport> {
    cfg.validate()?;
    if rates.iter().any(|r| !(0.0..=0.5).contains(r)) {
        return Err(Error::Config("outlier ratios must lie in [0, 0.5]".into()));
    }
    let mut accuracy = McResult::new(&RANSAC_COLUMNS);
    let mut timing = McResult::new(&TIMING_COLUMNS);
    for (c, &rate) in rates.iter().enumerate() {
        let cfg_r = SimConfig {
            outlier_ratio: rate,
            ..cfg.clone()
        };
        let trials: Vec<_> = (0..runs)
            .into_par_iter()
            .map(|r| ransac_trial(&cfg_r, &mut trial_rng(seed, c as u64, r as u64)).ok())
            .collect();
        let trials: Vec<_> = trials.into_iter().flatten().collect();
        let three: Vec<_> = trials.iter().filter_map(|t| t.three).collect();
        let five: Vec<_> = trials.iter().filter_map(|t| t.five).collect();
        type Stats = (f64, f64, usize, f64, f64, f64);
        let col = |v: &[Stats], f: fn(&Stats) -> f64| v.iter().map(f).collect::<Vec<_>>();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / (v.len().max(1) as f64);
        let t3 = median(col(&three, |s| s.3));
        let t5 = median(col(&five, |s| s.3));
        accuracy.push(vec![
            rate,
            runs as f64,
            (runs - three.len()) as f64,
            (runs - five.len()) as f64,
            median(col(&three, |s| s.0)),
            median(col(&five, |s| s.0)),
            rmse(col(&three, |s| s.0).into_iter()),
            rmse(col(&five, |s| s.0).into_iter()),
            median(col(&three, |s| s.1)),
            median(col(&five, |s| s.1)),
            rmse(col(&three, |s| s.1).into_iter()),
            rmse(col(&five, |s| s.1).into_iter()),
            mean(col(&three, |s| s.2 as f64)),
            mean(col(&five, |s| s.2 as f64)),
            mean(col(&three, |s| s.4)),
            mean(col(&three, |s| s.5)),
            mean(col(&five, |s| s.4)),
            mean(col(&five, |s| s.5)),
        ]);
        timing.push(vec![rate, t3, t5, 1.0 - t3 / t5]);
    }
    Ok(RansacReport { accuracy, timing })
}

/// Noise-variance estimates from `cfg.n_points` stereo pairs per trial.
pub fn run_noise_est(cfg: &SimConfig, runs: usize, seed: u64) -> Result<McResult> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let sigma = cfg.sigma();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<_> = (0..runs)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut rng = trial_rng(seed, 0, r as u64);
            let points = gen_scene(cfg, &mut rng)?;
            let pairs = points
                .iter()
                .map(|p| {
                    let z = project(p)?;
                    let y = project(&rig.extrinsic.transform_point(p))?;
                    let mut jitter = || Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    Ok((z + jitter(), y + jitter()))
                })
                .collect::<Result<Vec<_>>>()?;
            let est = estimate_noise_variance(&pairs, &rig)?;
            let truth = sigma * sigma;
            let rel = if truth > 0.0 { est / truth - 1.0 } else { est };
            Ok(vec![r as f64, pairs.len() as f64, cfg.sigma_px, truth, est, rel])
        })
        .collect();
    let mut out = McResult::new(&NOISE_COLUMNS);
    for row in rows {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnp_table_shape_and_determinism() {
        let cfg = SimConfig::default();
        let a = run_mc_pnp(&cfg, &[20, 40], 12, 5).unwrap();
        let b = run_mc_pnp(&cfg, &[20, 40], 12, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert!(a.rows.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(a.get(1, "n"), 40.0);
    }

    #[test]
    fn zero_noise_pnp_is_exact() {
        let cfg = SimConfig {
            sigma_px: 0.0,
            ..Default::default()
        };
        let t = run_mc_pnp(&cfg, &[10], 5, 1).unwrap();
        for c in [
            "rmse_yaw_ls",
            "rmse_yaw_be",
            "rmse_yaw_gn",
            "rmse_t_ls",
            "rmse_t_be",
            "rmse_t_gn",
        ] {
            assert!(t.get(0, c) < 1e-9, "{c}: {}", t.get(0, c));
        }
    }

    #[test]
    fn ransac_report_is_paired_and_reproducible() {
        let cfg = SimConfig {
            rp_prior_noise_deg: 0.2,
            ..Default::default()
        };
        let a = run_mc_ransac(&cfg, &[0.2], 6, 3).unwrap();
        let b = run_mc_ransac(&cfg, &[0.2], 6, 3).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.timing.rows.len(), 1);
        assert!(run_mc_ransac(&cfg, &[0.7], 1, 0).is_err());
    }

    #[test]
    fn noise_estimates_are_close() {
        let cfg = SimConfig {
            n_points: 2000,
            ..Default::default()
        };
        let t = run_noise_est(&cfg, 4, 2).unwrap();
        for r in t.column("rel_error").unwrap() {
            assert!(r.abs() < 0.15);
        }
    }
}
