//! Rotation parameterizations, pinhole projection and epipolar machinery.
//!
//! Transform convention: a [`PoseSE3`] named `b_from_a` maps points as
//! `p_b = R * p_a + t`, and `(R, t)^-1 = (R^T, -R^T t)`.
//!
//! Rotations use the yaw / roll-pitch split `R = R_yaw(psi) * R_rp(theta, phi)`
//! where
//!
//! ```text
//! R_yaw = [  cos  sin  0 ]     R_rp = [ cos th   -sin th sin ph   sin th cos ph ]
//!         [ -sin  cos  0 ]            [   0         cos ph           sin ph     ]
//!         [   0    0   1 ]            [ -sin th  -cos th sin ph   cos th cos ph ]
//! ```
//!
//! All image quantities are normalized coordinates (pixel offset / focal).

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum depth accepted by [`project`].
pub const DEPTH_FLOOR: f64 = 1e-6;

/// Inputs with `|R(3,1)|` at or above this are treated as gimbal-degenerate.
pub const GIMBAL_LIMIT: f64 = 1.0 - 1e-9;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Yaw rotation `R_yaw(psi)`.
pub fn rot_yaw(psi: f64) -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(rot_yaw_matrix(psi))
}

fn rot_yaw_matrix(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`rot_yaw`] with respect to `psi`.
pub fn rot_yaw_deriv(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(-s, c, 0.0, -c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Combined roll-pitch rotation `R_rp(theta, phi)` (pitch first argument).
pub fn rot_rp(theta: f64, phi: f64) -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(rot_rp_matrix(theta, phi))
}

fn rot_rp_matrix(theta: f64, phi: f64) -> Matrix3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Matrix3::new(ct, -st * sp, st * cp, 0.0, cp, sp, -st, -ct * sp, ct * cp)
}

/// Partial derivatives of [`rot_rp`] as `(d/dtheta, d/dphi)`.
pub fn rot_rp_deriv(theta: f64, phi: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let d_theta = Matrix3::new(-st, -ct * sp, ct * cp, 0.0, 0.0, 0.0, -ct, st * sp, -st * cp);
    let d_phi = Matrix3::new(0.0, -st * cp, -st * sp, 0.0, -sp, cp, 0.0, -ct * cp, -ct * sp);
    (d_theta, d_phi)
}

/// Yaw, pitch and roll of the split `R = R_yaw(yaw) * R_rp(pitch, roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerYRP {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerYRP {
    pub fn to_rotation(&self) -> Rotation3<f64> {
        rot_yaw(self.yaw) * rot_rp(self.pitch, self.roll)
    }
}

/// Invert the yaw / roll-pitch split.
///
/// Pitch and roll come from the third row, which `R_yaw` leaves untouched;
/// yaw is recovered with `atan2` from the first column of `R * R_rp^T`.
pub fn factor_yaw_rollpitch(r: &Rotation3<f64>) -> Result<EulerYRP> {
    let m = r.matrix();
    let r31 = m[(2, 0)];
    if !r31.is_finite() || r31.abs() >= GIMBAL_LIMIT {
        return Err(Error::DegenerateFactorization(r31.abs()));
    }
    let pitch = -r31.asin();
    let roll = (-m[(2, 1)]).atan2(m[(2, 2)]);
    let yaw_part = m * rot_rp_matrix(pitch, roll).transpose();
    // First column of R_yaw is (cos, -sin, 0).
    let yaw = (-yaw_part[(1, 0)]).atan2(yaw_part[(0, 0)]);
    Ok(EulerYRP {
        yaw: wrap_angle(yaw),
        pitch,
        roll,
    })
}

/// Extract only the roll-pitch factor `R_rp` of a rotation.
pub fn rp_factor(r: &Rotation3<f64>) -> Result<Rotation3<f64>> {
    let e = factor_yaw_rollpitch(r)?;
    Ok(rot_rp(e.pitch, e.roll))
}

/// 4-DOF state: yaw and translation, roll/pitch supplied externally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose4 {
    pub yaw: f64,
    pub t: Vector3<f64>,
}

impl Pose4 {
    pub fn new(yaw: f64, t: Vector3<f64>) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            t,
        }
    }

    /// Full pose for a given roll-pitch pre-rotation.
    pub fn to_se3(&self, r_rp: &Rotation3<f64>) -> PoseSE3 {
        PoseSE3::new(rot_yaw(self.yaw) * r_rp, self.t)
    }
}

/// Rigid transform `p_b = R p_a + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }
}

/// Calibrated stereo pair.
///
/// `extrinsic` maps keyframe-left points into the keyframe-right camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub extrinsic: PoseSE3,
    /// Focal length in pixels.
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl StereoRig {
    /// Rig whose right camera center sits at `baseline` (left-camera frame)
    /// with rotation `rotation` relative to the left camera.
    pub fn from_baseline(
        rotation: Rotation3<f64>,
        baseline: Vector3<f64>,
        focal: f64,
        width: f64,
        height: f64,
    ) -> Result<Self> {
        if baseline.norm() == 0.0 || !baseline.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("stereo baseline must be nonzero".into()));
        }
        if !(focal > 0.0) {
            return Err(Error::Config(format!("focal length must be > 0, got {focal}")));
        }
        let right_from_left = PoseSE3::new(rotation.inverse(), -(rotation.inverse() * baseline));
        Ok(Self {
            extrinsic: right_from_left,
            focal,
            width,
            height,
        })
    }

    /// Rectified rig with the right camera `baseline` metres along +x.
    pub fn rectified(baseline: f64, focal: f64, width: f64, height: f64) -> Result<Self> {
        Self::from_baseline(
            Rotation3::identity(),
            Vector3::new(baseline, 0.0, 0.0),
            focal,
            width,
            height,
        )
    }

    /// Signed horizontal baseline when the rig is rectified.
    pub fn rectified_baseline(&self) -> Option<f64> {
        let rot_err = (self.extrinsic.rotation.matrix() - Matrix3::identity()).norm();
        let t = self.extrinsic.translation;
        if rot_err < 1e-12 && t.y.abs() < 1e-12 && t.z.abs() < 1e-12 && t.x != 0.0 {
            Some(-t.x)
        } else {
            None
        }
    }

    /// Half extents of the image in normalized coordinates.
    pub fn half_fov(&self) -> (f64, f64) {
        (0.5 * self.width / self.focal, 0.5 * self.height / self.focal)
    }

    /// Whether a normalized point falls inside the image.
    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        let (hx, hy) = self.half_fov();
        uv.x.abs() <= hx && uv.y.abs() <= hy
    }
}

/// Pinhole projection onto the normalized image plane.
pub fn project(p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(p.z > DEPTH_FLOOR) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Point on the ray through `uv` at depth `depth`.
pub fn backproject(uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    Vector3::new(uv.x * depth, uv.y * depth, depth)
}

pub fn homogeneous(uv: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(uv.x, uv.y, 1.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Epipolar line in the keyframe image induced by the current-frame point
/// `q` under `pose` (keyframe to current): `l = ([t]x R)^T q^h`.
pub fn epipolar_line(q: &Vector2<f64>, pose: &PoseSE3) -> Result<Vector3<f64>> {
    if pose.translation.norm() == 0.0 {
        return Err(Error::DegenerateEpipolar);
    }
    let e = skew(&pose.translation) * pose.rotation.matrix();
    Ok(e.transpose() * homogeneous(q))
}

/// Signed distance of `pt` to `line` in normalized coordinates.
pub fn epipolar_distance(line: &Vector3<f64>, pt: &Vector2<f64>) -> Result<f64> {
    let norm = line.x.hypot(line.y);
    if !(norm > 0.0) {
        return Err(Error::DegenerateLine(norm));
    }
    Ok(line.dot(&homogeneous(pt)) / norm)
}

/// Pose from the keyframe-right camera to the current camera,
/// `current_from_right = current_from_left * (right_from_left)^-1`.
pub fn compose_stereo_pose(current_from_left: &PoseSE3, rig: &StereoRig) -> PoseSE3 {
    current_from_left.compose(&rig.extrinsic.inverse())
}
