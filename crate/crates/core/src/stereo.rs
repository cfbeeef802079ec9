//! Image-noise variance estimation and uncertainty-aware stereo triangulation.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::StereoRig;

/// Smallest disparity (normalized units) accepted by [`triangulate`].
pub const DISPARITY_FLOOR: f64 = 1e-6;

/// Minimum number of stereo pairs for [`estimate_noise_variance`].
pub const MIN_NOISE_PAIRS: usize = 10;

/// A tracked feature: current-left `q`, keyframe-left `z`, keyframe-right `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub q: Vector2<f64>,
    pub z: Vector2<f64>,
    pub y: Vector2<f64>,
    /// Ground-truth label, only known for simulated data.
    pub is_inlier_truth: Option<bool>,
}

impl Correspondence {
    pub fn new(q: Vector2<f64>, z: Vector2<f64>, y: Vector2<f64>) -> Self {
        Self {
            q,
            z,
            y,
            is_inlier_truth: None,
        }
    }
}

/// Triangulated keyframe-left point and its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriPoint {
    pub p: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// Consistent estimate of the per-coordinate image noise variance.
///
/// On a rectified rig the vertical coordinates of a stereo pair agree up to
/// noise, so `v_z - v_y ~ N(0, 2 sigma^2)` and the mean of the squared
/// differences over two is a consistent estimator.
pub fn estimate_noise_variance(pairs: &[(Vector2<f64>, Vector2<f64>)], rig: &StereoRig) -> Result<f64> {
    if rig.rectified_baseline().is_none() {
        return Err(Error::UnsupportedConfiguration(
            "noise-variance estimation requires a rectified rig".into(),
        ));
    }
    if pairs.len() < MIN_NOISE_PAIRS {
        return Err(Error::InsufficientData {
            needed: MIN_NOISE_PAIRS,
            got: pairs.len(),
        });
    }
    let sum: f64 = pairs.iter().map(|(z, y)| (z.y - y.y).powi(2)).sum();
    Ok(sum / (2.0 * pairs.len() as f64))
}

/// Jacobian of the rectified triangulation with respect to `(z_u, z_v, y_u, y_v)`.
pub fn triangulation_jacobian(z: &Vector2<f64>, y: &Vector2<f64>, baseline: f64) -> Result<Matrix3x4<f64>> {
    let d = z.x - y.x;
    if !(d > DISPARITY_FLOOR) {
        return Err(Error::NonPositiveDisparity(d));
    }
    let depth = baseline / d;
    let g = depth / d;
    Ok(Matrix3x4::new(
        depth - z.x * g,
        0.0,
        z.x * g,
        0.0,
        -z.y * g,
        depth,
        z.y * g,
        0.0,
        -g,
        0.0,
        g,
        0.0,
    ))
}

/// Triangulate a rectified stereo observation.
///
/// Depth comes from the horizontal disparity and the lateral coordinates
/// from the left ray. The covariance is the first-order propagation of
/// isotropic image noise `sigma2 * I_4` through the triangulation.
pub fn triangulate(z: &Vector2<f64>, y: &Vector2<f64>, rig: &StereoRig, sigma2: f64) -> Result<TriPoint> {
    let baseline = rig
        .rectified_baseline()
        .ok_or_else(|| Error::UnsupportedConfiguration("triangulation requires a rectified rig".into()))?;
    if baseline <= 0.0 {
        return Err(Error::UnsupportedConfiguration(
            "right camera must sit on the +x side of the left camera".into(),
        ));
    }
    let d = z.x - y.x;
    if !(d > DISPARITY_FLOOR) {
        return Err(Error::NonPositiveDisparity(d));
    }
    let depth = baseline / d;
    let p = Vector3::new(z.x * depth, z.y * depth, depth);
    let j = triangulation_jacobian(z, y, baseline)?;
    let mut cov = j * j.transpose() * sigma2;
    cov = (cov + cov.transpose()) * 0.5;
    Ok(TriPoint { p, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rig() -> StereoRig {
        StereoRig::rectified(0.2, 1100.0, 800.0, 800.0).unwrap()
    }

    fn observe(p: &Vector3<f64>, rig: &StereoRig) -> (Vector2<f64>, Vector2<f64>) {
        (project(p).unwrap(), project(&rig.extrinsic.transform_point(p)).unwrap())
    }

    #[test]
    fn depth_from_disparity() {
        let t = triangulate(&Vector2::zeros(), &Vector2::new(-0.02, 0.0), &rig(), 0.0).unwrap();
        assert_relative_eq!(t.p, Vector3::new(0.0, 0.0, 10.0), epsilon = 1e-12);
        assert_eq!(t.cov, Matrix3::zeros());
    }

    #[test]
    fn noise_free_round_trip() {
        let rig = rig();
        let p = Vector3::new(0.4, -0.3, 3.0);
        let (z, y) = observe(&p, &rig);
        let t = triangulate(&z, &y, &rig, 1e-6).unwrap();
        assert_relative_eq!(t.p, p, epsilon = 1e-10);
        let (z2, y2) = observe(&t.p, &rig);
        assert_relative_eq!(z2, z, epsilon = 1e-12);
        assert_relative_eq!(y2, y, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_disparity_and_unrectified_rigs() {
        let rig = rig();
        let z = Vector2::new(0.0, 0.0);
        assert!(matches!(
            triangulate(&z, &Vector2::new(0.01, 0.0), &rig, 1.0),
            Err(Error::NonPositiveDisparity(_))
        ));
        assert!(matches!(
            triangulate(&z, &z, &rig, 1.0),
            Err(Error::NonPositiveDisparity(_))
        ));
        let tilted = StereoRig::from_baseline(
            crate::geometry::rot_yaw(0.01),
            Vector3::new(0.2, 0.0, 0.0),
            1100.0,
            800.0,
            800.0,
        )
        .unwrap();
        assert!(matches!(
            triangulate(&z, &Vector2::new(-0.02, 0.0), &tilted, 1.0),
            Err(Error::UnsupportedConfiguration(_))
        ));
        let pairs = vec![(z, z); 20];
        assert!(matches!(
            estimate_noise_variance(&pairs, &tilted),
            Err(Error::UnsupportedConfiguration(_))
        ));
        assert!(matches!(
            estimate_noise_variance(&pairs[..5], &rig),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let z = Vector2::new(0.12, -0.07);
        let y = Vector2::new(0.07, -0.07);
        let j = triangulation_jacobian(&z, &y, 0.2).unwrap();
        let h = 1e-7;
        let rig = rig();
        let base = [z.x, z.y, y.x, y.y];
        for k in 0..4 {
            let mut up = base;
            let mut dn = base;
            up[k] += h;
            dn[k] -= h;
            let pu = triangulate(&Vector2::new(up[0], up[1]), &Vector2::new(up[2], up[3]), &rig, 0.0)
                .unwrap()
                .p;
            let pd = triangulate(&Vector2::new(dn[0], dn[1]), &Vector2::new(dn[2], dn[3]), &rig, 0.0)
                .unwrap()
                .p;
            let fd = (pu - pd) / (2.0 * h);
            let col = j.column(k);
            assert!((fd - col).norm() <= 1e-5 * col.norm().max(1.0), "column {k}");
        }
    }

    #[test]
    fn zero_noise_variance_is_zero() {
        let rig = rig();
        let pairs: Vec<_> = (0..50)
            .map(|i| observe(&Vector3::new(0.1 * i as f64 - 2.0, 0.5, 2.0 + 0.1 * i as f64), &rig))
            .collect();
        assert!(estimate_noise_variance(&pairs, &rig).unwrap() <= 1e-15);
    }

    #[test]
    fn noise_variance_is_consistent() {
        let rig = rig();
        let sigma = 2.5 / 1100.0;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<_> = (0..10_000)
            .map(|i| {
                let p = Vector3::new(
                    (i % 37) as f64 * 0.05 - 0.9,
                    (i % 23) as f64 * 0.05 - 0.5,
                    1.0 + (i % 91) as f64 * 0.1,
                );
                let (z, y) = observe(&p, &rig);
                (
                    z + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                    y + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                )
            })
            .collect();
        let est = estimate_noise_variance(&pairs, &rig).unwrap();
        assert!(
            (est / (sigma * sigma) - 1.0).abs() < 0.1,
            "ratio {}",
            est / (sigma * sigma)
        );
    }

    /// Empirical covariance and whitened errors of noisy triangulations.
    fn monte_carlo(
        p: Vector3<f64>,
        baseline: f64,
        sigma: f64,
        trials: usize,
        seed: u64,
    ) -> (Matrix3<f64>, Matrix3<f64>, Vector3<f64>, f64) {
        let rig = StereoRig::rectified(baseline, 1100.0, 800.0, 800.0).unwrap();
        let (z, y) = observe(&p, &rig);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emp = Matrix3::zeros();
        let mut reported = Matrix3::zeros();
        let mut whitened_sq = Vector3::zeros();
        let mut depth_err_sq = 0.0;
        for _ in 0..trials {
            let zn = z + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            let yn = y + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            let t = triangulate(&zn, &yn, &rig, sigma * sigma).unwrap();
            let e = t.p - p;
            emp += e * e.transpose();
            reported += t.cov;
            let chol = t.cov.cholesky().unwrap();
            let w = chol.l().solve_lower_triangular(&e).unwrap();
            whitened_sq += w.component_mul(&w);
            depth_err_sq += (e.z / p.z).powi(2);
        }
        let n = trials as f64;
        (emp / n, reported / n, whitened_sq / n, (depth_err_sq / n).sqrt())
    }

    #[test]
    fn reported_covariance_matches_monte_carlo() {
        let sigma = 2.5 / 1100.0;
        // A point at depth 3 m, off-axis so every covariance entry is populated.
        let p = Vector3::new(0.6, -0.4, 3.0);
        let (emp, reported, _, _) = monte_carlo(p, 0.2, sigma, 5_000, 11);
        let rel = (emp - reported).norm() / reported.norm();
        assert!(rel <= 0.2, "relative Frobenius error {rel}");
    }

    #[test]
    fn whitened_errors_have_unit_variance() {
        let sigma = 2.5 / 1100.0;
        let (_, _, whitened, _) = monte_carlo(Vector3::new(-0.5, 0.3, 2.5), 0.2, sigma, 5_000, 12);
        for k in 0..3 {
            assert!((whitened[k] - 1.0).abs() <= 0.2, "axis {k}: {}", whitened[k]);
        }
    }

    #[test]
    fn doubling_baseline_halves_relative_depth_error() {
        let sigma = 2.5 / 1100.0;
        let p = Vector3::new(0.3, 0.2, 4.0);
        let (_, _, _, e1) = monte_carlo(p, 0.2, sigma, 5_000, 13);
        let (_, _, _, e2) = monte_carlo(p, 0.4, sigma, 5_000, 14);
        let ratio = e2 / e1;
        assert!((ratio - 0.5).abs() <= 0.5 * 0.15, "ratio {ratio}");
    }
}
