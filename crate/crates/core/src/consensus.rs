//! Minimal-set consensus for the 4-DOF model: three correspondences fix yaw
//! and translation once roll and pitch are known, so hypotheses are cheap and
//! far fewer samples are needed than with a 5-point essential-matrix model.

use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose4, StereoRig};
use crate::pnp4dof::{
    build_linear_system, gn_refine, ml_cost, normalize_state, prerotate, solve_be, solve_ls, triangulate_all,
    worst_epipolar_distances, PreRotated, StateVec5,
};
use crate::stereo::Correspondence;

/// Iteration count returned when no inliers are expected.
pub const ITERATION_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Probability of drawing at least one all-inlier sample.
    pub confidence: f64,
    pub sample_size: usize,
    /// Inlier threshold on the larger of the two epipolar distances
    /// (normalized units). `None` uses three times the estimated noise std.
    pub threshold: Option<f64>,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            confidence: 0.99,
            sample_size: 3,
            threshold: None,
            max_iterations: 1000,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must lie in (0, 1)".into()));
        }
        if self.sample_size < 3 {
            return Err(Error::Config("sample size must be at least 3".into()));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                return Err(Error::Config("inlier threshold must be positive".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub inliers: Vec<bool>,
    pub pose: Pose4,
    /// Best minimal-sample hypothesis before the refit.
    pub hypothesis: Pose4,
    pub iterations: usize,
    pub elapsed: Duration,
}

impl ConsensusResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Samples needed to draw one all-inlier set of size `s` with probability
/// `p` when a fraction `w` of the data are inliers.
pub fn required_iterations(p: f64, w: f64, s: usize) -> usize {
    if !(w > 0.0) {
        return ITERATION_CAP;
    }
    if w >= 1.0 {
        return 1;
    }
    let all_in = w.powi(s as i32);
    let denom = (1.0 - all_in).ln();
    if denom == 0.0 {
        return ITERATION_CAP;
    }
    let n = ((1.0 - p).ln() / denom).ceil();
    if n.is_finite() {
        (n.max(1.0) as usize).min(ITERATION_CAP)
    } else {
        ITERATION_CAP
    }
}

/// Least-squares solve of the 6x5 system of a minimal sample.
pub fn minimal_solve(pre: &[PreRotated], q: &[Vector2<f64>]) -> Result<StateVec5> {
    if pre.len() != 3 || q.len() != 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: pre.len().min(q.len()),
        });
    }
    let sys = build_linear_system(pre, q)?;
    match solve_ls(&sys) {
        Err(Error::DegenerateGeometry(_)) => Err(Error::DegenerateSample),
        other => other,
    }
}

/// Inlier iff both epipolar distances are within `threshold`.
///
/// Correspondences whose distances cannot be evaluated count as outliers.
pub fn classify_inliers(
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    corrs: &[Correspondence],
    rig: &StereoRig,
    threshold: f64,
) -> Vec<bool> {
    worst_epipolar_distances(pose, r_rp, corrs, rig)
        .into_iter()
        .map(|d| d <= threshold)
        .collect()
}

fn subset<T: Copy>(items: &[T], mask: &[bool]) -> Vec<T> {
    items.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect()
}

/// Adaptive RANSAC over 3-point hypotheses followed by a bias-eliminated
/// refit and one Gauss-Newton step on the consensus set. The step is also
/// taken from the best hypothesis and the lower epipolar cost wins.
///
/// `sigma2` is the image noise variance, used for the triangulation
/// covariances and the default threshold.
pub fn ransac_4dof(
    corrs: &[Correspondence],
    r_rp: &Rotation3<f64>,
    rig: &StereoRig,
    sigma2: f64,
    params: &RansacParams,
) -> Result<ConsensusResult> {
    params.validate()?;
    let start = Instant::now();
    let s = params.sample_size;
    let n = corrs.len();
    if n < s {
        return Err(Error::InsufficientData { needed: s, got: n });
    }
    let threshold = params.threshold.unwrap_or(3.0 * sigma2.sqrt());
    let pre = prerotate(&triangulate_all(corrs, rig, sigma2)?, r_rp);
    let q: Vec<_> = corrs.iter().map(|c| c.q).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut best: Option<(usize, f64, Pose4, Vec<bool>)> = None;
    let mut budget = params.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = index::sample(&mut rng, n, s).into_vec();
        let sample_pre: Vec<_> = idx.iter().map(|&i| pre[i]).collect();
        let sample_q: Vec<_> = idx.iter().map(|&i| q[i]).collect();
        let x = if s == 3 {
            minimal_solve(&sample_pre, &sample_q)
        } else {
            build_linear_system(&sample_pre, &sample_q).and_then(|sys| solve_ls(&sys))
        };
        let Ok(pose) = x.and_then(|x| normalize_state(&x)) else {
            continue;
        };
        let mask = classify_inliers(&pose, r_rp, corrs, rig, threshold);
        let count = mask.iter().filter(|b| **b).count();
        if count < s {
            continue;
        }
        let better = match &best {
            None => true,
            Some((c, _, _, _)) if count > *c => true,
            Some((c, cost, _, _)) if count == *c => {
                ml_cost(&pose, r_rp, &subset(corrs, &mask), rig).is_ok_and(|v| v < *cost)
            }
            _ => false,
        };
        if better {
            let cost = ml_cost(&pose, r_rp, &subset(corrs, &mask), rig).unwrap_or(f64::INFINITY);
            let w = count as f64 / n as f64;
            budget = required_iterations(params.confidence, w, s).min(params.max_iterations);
            best = Some((count, cost, pose, mask));
        }
    }
    let Some((count, _, hypothesis, mask)) = best else {
        return Err(Error::ConsensusFailure { iterations, best: 0 });
    };

    let inlier_corrs = subset(corrs, &mask);
    let refit = build_linear_system(&subset(&pre, &mask), &subset(&q, &mask))
        .and_then(|sys| solve_be(&sys))
        .and_then(|x| normalize_state(&x))
        .unwrap_or(hypothesis);
    // A false inlier lying along its epipolar line passes classification but
    // can drag the refit; let the epipolar cost pick the starting point.
    let cost = |p: &Pose4| ml_cost(p, r_rp, &inlier_corrs, rig).unwrap_or(f64::INFINITY);
    let refined = [refit, hypothesis]
        .into_iter()
        .map(|start| gn_refine(&start, r_rp, &inlier_corrs, rig, 1).unwrap_or(start))
        .min_by(|a, b| cost(a).total_cmp(&cost(b)))
        .unwrap_or(refit);
    let final_mask = classify_inliers(&refined, r_rp, corrs, rig, threshold);
    let (pose, inliers) = if final_mask.iter().filter(|b| **b).count() >= count {
        (refined, final_mask)
    } else {
        (refined, mask)
    };
    Ok(ConsensusResult {
        inliers,
        pose,
        hypothesis,
        iterations,
        elapsed: start.elapsed(),
    })
}
