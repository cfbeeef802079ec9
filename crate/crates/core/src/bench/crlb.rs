//! Cramer-Rao bound for yaw and translation under the epipolar-distance
//! residual model with i.i.d. Gaussian distances of variance `sigma2`.

use nalgebra::{Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, Pose4, StereoRig};
use crate::pnp4dof::information_matrix;
use crate::stereo::Correspondence;

/// Noise-free correspondences of `points` under `pose`.
pub fn ideal_correspondences(
    points: &[Vector3<f64>],
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    rig: &StereoRig,
) -> Result<Vec<Correspondence>> {
    let se3 = pose.to_se3(r_rp);
    points
        .iter()
        .map(|p| {
            Ok(Correspondence::new(
                project(&se3.transform_point(p))?,
                project(p)?,
                project(&rig.extrinsic.transform_point(p))?,
            ))
        })
        .collect()
}

/// `sigma2 * (J^T J)^-1` for `(yaw, t1, t2, t3)` at the true pose.
pub fn crlb_4dof(
    points: &[Vector3<f64>],
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    rig: &StereoRig,
    sigma2: f64,
) -> Result<Matrix4<f64>> {
    let corrs = ideal_correspondences(points, pose, r_rp, rig)?;
    let info = information_matrix(pose, r_rp, &corrs, rig)?;
    let svd = info.svd(false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min();
    if !(cond < crate::pnp4dof::MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let chol = info.cholesky().ok_or(Error::DegenerateGeometry(cond))?;
    let inv = chol.inverse() * sigma2;
    Ok((inv + inv.transpose()) * 0.5)
}
