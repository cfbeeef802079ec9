//! Gravity-prior fusion: gyro attitude propagation, visual and gravity
//! residuals, and block-coordinate descent that alternates Gauss-Newton
//! updates of the 6-DOF state with a closed-form Wishart-MAP update of the
//! accelerometer covariance.
//!
//! Attitudes are body-to-world, `C = R_yaw(yaw) * R_rp(pitch, roll)`, with the
//! world z-axis along the sensed gravity direction. The camera frame is the
//! IMU body frame. Between the keyframe (first instant) and the current frame
//! (last instant) the relative rotation is
//! `R_rp(current)^T * R_yaw(yaw) * R_rp(keyframe)`, so `yaw` is the relative
//! heading between the two gravity-levelled frames.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Rotation3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    factor_yaw_rollpitch, rot_rp, rot_rp_deriv, rot_yaw, rot_yaw_deriv, EulerYRP, PoseSE3, DEPTH_FLOOR,
};
use crate::sim::GRAVITY;
use crate::stereo::{Correspondence, TriPoint};

/// Dimension of the accelerometer residual.
const DIM: f64 = 3.0;

/// Largest gap between IMU samples accepted by [`propagate_attitude`] (s).
pub const MAX_SAMPLE_GAP: f64 = 0.1;

/// Accelerometer norms below this fraction of gravity carry no attitude information.
pub const FREE_FALL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    /// Body angular rate (rad/s).
    pub gyro: Vector3<f64>,
    /// Specific force in the body frame (m/s^2).
    pub accel: Vector3<f64>,
}

/// Roll and pitch of one absolute attitude.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tilt {
    pub pitch: f64,
    pub roll: f64,
}

impl Tilt {
    pub fn new(pitch: f64, roll: f64) -> Self {
        Self { pitch, roll }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        rot_rp(self.pitch, self.roll)
    }

    pub fn of(e: &EulerYRP) -> Self {
        Self::new(e.pitch, e.roll)
    }
}

/// Unit gravity direction in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityVector(Vector3<f64>);

impl GravityVector {
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Config(
                "gravity direction must be a nonzero finite vector".into(),
            ));
        }
        Ok(Self(v / n))
    }

    /// The world z-axis.
    pub fn up() -> Self {
        Self(Vector3::z())
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

impl Default for GravityVector {
    fn default() -> Self {
        Self::up()
    }
}

/// Conjugate prior on the accelerometer residual covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WishartPrior {
    pub scale: Matrix3<f64>,
    /// Degrees of freedom, strictly greater than 4.
    pub dof: f64,
}

impl WishartPrior {
    pub fn new(scale: Matrix3<f64>, dof: f64) -> Result<Self> {
        if !(dof > DIM + 1.0) {
            return Err(Error::Config(format!("Wishart dof must exceed 4, got {dof}")));
        }
        if (scale - scale.transpose()).norm() > 1e-12 * scale.norm().max(1.0) {
            return Err(Error::Config("Wishart scale must be symmetric".into()));
        }
        let min_eig = scale.symmetric_eigenvalues().min();
        if !(min_eig >= -1e-15 * scale.norm().max(1.0)) {
            return Err(Error::Config(format!(
                "Wishart scale must be PSD (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self { scale, dof })
    }

    /// Prior whose mode equals `mode`.
    pub fn from_mode(mode: Matrix3<f64>, dof: f64) -> Result<Self> {
        Self::new(mode * (dof + DIM + 1.0), dof)
    }

    pub fn mode(&self) -> Matrix3<f64> {
        self.scale / (self.dof + DIM + 1.0)
    }
}

/// Relative yaw and translation from the keyframe plus the absolute tilt at
/// every IMU instant; the first tilt is the keyframe, the last the current frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub yaw: f64,
    pub t: Vector3<f64>,
    pub tilts: Vec<Tilt>,
}

impl FusionState {
    pub fn validate(&self) -> Result<()> {
        if self.tilts.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: self.tilts.len(),
            });
        }
        let finite = self.yaw.is_finite()
            && self.t.iter().all(|v| v.is_finite())
            && self.tilts.iter().all(|a| a.pitch.is_finite() && a.roll.is_finite());
        if !finite {
            return Err(Error::Config("fusion state has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn keyframe_tilt(&self) -> Tilt {
        self.tilts[0]
    }

    pub fn current_tilt(&self) -> Tilt {
        self.tilts[self.tilts.len() - 1]
    }

    /// Keyframe-to-current rotation.
    pub fn relative_rotation(&self) -> Rotation3<f64> {
        relative_rotation(self.yaw, &self.keyframe_tilt(), &self.current_tilt())
    }

    pub fn to_se3(&self) -> PoseSE3 {
        PoseSE3::new(self.relative_rotation(), self.t)
    }

    fn dim(&self) -> usize {
        4 + 2 * self.tilts.len()
    }

    fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = self.yaw;
        v.fixed_rows_mut::<3>(1).copy_from(&self.t);
        for (k, a) in self.tilts.iter().enumerate() {
            v[4 + 2 * k] = a.pitch;
            v[5 + 2 * k] = a.roll;
        }
        v
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        let k = (v.len() - 4) / 2;
        Self {
            yaw: v[0],
            t: Vector3::new(v[1], v[2], v[3]),
            tilts: (0..k).map(|i| Tilt::new(v[4 + 2 * i], v[5 + 2 * i])).collect(),
        }
    }
}

/// `R_rp(current)^T * R_yaw(yaw) * R_rp(keyframe)`.
pub fn relative_rotation(yaw: f64, keyframe: &Tilt, current: &Tilt) -> Rotation3<f64> {
    current.rotation().inverse() * rot_yaw(yaw) * keyframe.rotation()
}

/// Body rotation accumulated over `dt` at constant body rate `omega`.
pub fn gyro_increment(omega: &Vector3<f64>, dt: f64) -> Rotation3<f64> {
    Rotation3::new(omega * dt)
}

fn check_stream(samples: &[ImuSample]) -> Result<()> {
    for (k, w) in samples.windows(2).enumerate() {
        let dt = w[1].time - w[0].time;
        if !(dt > 0.0) {
            return Err(Error::StreamOrder(k + 1));
        }
        if dt > MAX_SAMPLE_GAP {
            return Err(Error::UnsupportedConfiguration(format!(
                "IMU gap of {dt:.3} s at sample {} exceeds {MAX_SAMPLE_GAP} s",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Absolute attitude at every sample time, starting from `start` at the first
/// sample and holding each gyro reading constant over the following interval.
pub fn propagate_attitude(start: &EulerYRP, samples: &[ImuSample]) -> Result<Vec<EulerYRP>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    check_stream(samples)?;
    let mut c = start.to_rotation();
    let mut out = Vec::with_capacity(samples.len());
    out.push(factor_yaw_rollpitch(&c)?);
    for w in samples.windows(2) {
        c *= gyro_increment(&w[0].gyro, w[1].time - w[0].time);
        out.push(factor_yaw_rollpitch(&c)?);
    }
    Ok(out)
}

/// Gravity direction seen in the body frame for a given tilt.
fn gravity_in_body(tilt: &Tilt, g: &GravityVector) -> Vector3<f64> {
    tilt.rotation().inverse() * g.as_vector()
}

/// Derivative of [`gravity_in_body`] with respect to (pitch, roll).
fn gravity_in_body_jacobian(tilt: &Tilt, g: &GravityVector) -> SMatrix<f64, 3, 2> {
    let (d_pitch, d_roll) = rot_rp_deriv(tilt.pitch, tilt.roll);
    let gv = g.as_vector();
    SMatrix::<f64, 3, 2>::from_columns(&[d_pitch.transpose() * gv, d_roll.transpose() * gv])
}

/// Unit accelerometer direction, rejecting samples too weak to carry gravity.
pub fn normalize_accel(accel: &Vector3<f64>) -> Result<Vector3<f64>> {
    let n = accel.norm();
    if !(n >= FREE_FALL_FRACTION * GRAVITY) {
        return Err(Error::FreeFall(n));
    }
    Ok(accel / n)
}

/// `a/|a| - R_rp^T g`: zero when the tilt maps gravity onto the sensed direction.
///
/// Only the tilt enters because the world z-axis is aligned with gravity.
pub fn gravity_residual(tilt: &Tilt, accel: &Vector3<f64>, g: &GravityVector) -> Result<Vector3<f64>> {
    Ok(normalize_accel(accel)? - gravity_in_body(tilt, g))
}

/// Gravity residual and its derivative with respect to (pitch, roll).
pub fn gravity_residual_jacobian(
    tilt: &Tilt,
    accel: &Vector3<f64>,
    g: &GravityVector,
) -> Result<(Vector3<f64>, SMatrix<f64, 3, 2>)> {
    Ok((gravity_residual(tilt, accel, g)?, -gravity_in_body_jacobian(tilt, g)))
}

/// Reprojection error `q - h(R p + t)` of a keyframe point in the current image.
pub fn visual_residual(state: &FusionState, corr: &Correspondence, tri: &TriPoint) -> Result<Vector2<f64>> {
    let pc = state.to_se3().transform_point(&tri.p);
    if !(pc.z > DEPTH_FLOOR) {
        return Err(Error::BehindCamera(pc.z));
    }
    Ok(corr.q - Vector2::new(pc.x / pc.z, pc.y / pc.z))
}

/// Visual residual and its derivative with respect to
/// `(yaw, t, keyframe pitch, keyframe roll, current pitch, current roll)`.
pub fn visual_residual_jacobian(
    state: &FusionState,
    corr: &Correspondence,
    tri: &TriPoint,
) -> Result<(Vector2<f64>, SMatrix<f64, 2, 8>)> {
    let key = state.keyframe_tilt();
    let cur = state.current_tilt();
    let rk = key.rotation();
    let rc_t = cur.rotation().inverse();
    let ry = rot_yaw(state.yaw);
    let levelled = rk * tri.p;
    let turned = ry * levelled;
    let pc = rc_t * turned + state.t;
    if !(pc.z > DEPTH_FLOOR) {
        return Err(Error::BehindCamera(pc.z));
    }
    let iz = 1.0 / pc.z;
    let r = corr.q - Vector2::new(pc.x * iz, pc.y * iz);
    // d r / d pc
    let dh = -Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
    let (dk_pitch, dk_roll) = rot_rp_deriv(key.pitch, key.roll);
    let (dc_pitch, dc_roll) = rot_rp_deriv(cur.pitch, cur.roll);
    let rc_ry = rc_t.matrix() * ry.matrix();
    let cols = [
        rc_t.matrix() * rot_yaw_deriv(state.yaw) * levelled,
        Vector3::x(),
        Vector3::y(),
        Vector3::z(),
        rc_ry * dk_pitch * tri.p,
        rc_ry * dk_roll * tri.p,
        dc_pitch.transpose() * turned,
        dc_roll.transpose() * turned,
    ];
    let mut j = SMatrix::<f64, 2, 8>::zeros();
    for (i, c) in cols.iter().enumerate() {
        j.set_column(i, &(dh * c));
    }
    Ok((r, j))
}

/// `(1/K) sum r r^T`.
pub fn sample_covariance(residuals: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
    if residuals.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let sum: Matrix3<f64> = residuals.iter().map(|r| r * r.transpose()).sum();
    Ok(sum / residuals.len() as f64)
}

/// Posterior mode `(Psi + K S) / (nu + K + 4)` of the residual covariance.
pub fn wishart_map_update(prior: &WishartPrior, sample_cov: &Matrix3<f64>, count: usize) -> Matrix3<f64> {
    let k = count as f64;
    let m = (prior.scale + sample_cov * k) / (prior.dof + k + DIM + 1.0);
    0.5 * (m + m.transpose())
}

/// Negative log of the IMU residual likelihood plus the inverse-Wishart prior
/// on `cov`, dropping constants.
pub fn covariance_objective(residuals: &[Vector3<f64>], cov: &Matrix3<f64>, prior: &WishartPrior) -> Option<f64> {
    let chol = cov.cholesky()?;
    let inv = chol.inverse();
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mahal: f64 = residuals.iter().map(|r| (r.transpose() * inv * r)[0]).sum();
    let k = residuals.len() as f64;
    Some(0.5 * (mahal + (k + prior.dof + DIM + 1.0) * log_det + (prior.scale * inv).trace()))
}

/// Gaussian prior on one tilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltPrior {
    pub mean: Tilt,
    /// Covariance of (pitch, roll).
    pub cov: Matrix2<f64>,
}

/// Auxiliary information and stopping rules for [`bcd_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct BcdOptions {
    pub max_rounds: usize,
    /// Stop once the state update norm falls below this.
    pub tolerance: f64,
    /// Variance of one gyro-predicted step of the body gravity direction.
    pub gyro_step_var: f64,
    /// Relative yaw predicted by the gyro, as (mean, variance).
    pub yaw_prior: Option<(f64, f64)>,
    /// Belief on the keyframe tilt carried over from the previous solve.
    pub keyframe_prior: Option<TiltPrior>,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            tolerance: 1e-8,
            gyro_step_var: 1e-10,
            yaw_prior: None,
            keyframe_prior: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdResult {
    pub state: FusionState,
    pub imu_cov: Matrix3<f64>,
    pub rounds: usize,
    /// The normal equations became singular; `state` is the last good iterate.
    pub degraded: bool,
    /// Joint objective after each round, starting with the initial value.
    pub costs: Vec<f64>,
    /// Posterior covariance of the current tilt (pitch, roll).
    pub current_tilt_cov: Matrix2<f64>,
    /// Posterior variance of the relative yaw.
    pub yaw_var: f64,
}

struct Problem<'a> {
    corrs: &'a [Correspondence],
    tris: &'a [TriPoint],
    accel_dirs: Vec<Vector3<f64>>,
    increments: Vec<Rotation3<f64>>,
    vis_weight: f64,
    g: GravityVector,
    opts: &'a BcdOptions,
    prior: &'a WishartPrior,
}

impl Problem<'_> {
    fn imu_residuals(&self, s: &FusionState) -> Vec<Vector3<f64>> {
        s.tilts
            .iter()
            .zip(&self.accel_dirs)
            .map(|(a, dir)| dir - gravity_in_body(a, &self.g))
            .collect()
    }

    fn coupling(&self, s: &FusionState, k: usize) -> Vector3<f64> {
        let u0 = gravity_in_body(&s.tilts[k], &self.g);
        let u1 = gravity_in_body(&s.tilts[k + 1], &self.g);
        u1 - self.increments[k].inverse() * u0
    }

    /// State part of the objective with `cov_inv` held fixed; `None` if a
    /// point falls behind the camera.
    fn state_cost(&self, s: &FusionState, cov_inv: &Matrix3<f64>) -> Option<f64> {
        let mut c = 0.0;
        for (corr, tri) in self.corrs.iter().zip(self.tris) {
            c += self.vis_weight * visual_residual(s, corr, tri).ok()?.norm_squared();
        }
        for r in self.imu_residuals(s) {
            c += (r.transpose() * cov_inv * r)[0];
        }
        for k in 0..self.increments.len() {
            c += self.coupling(s, k).norm_squared() / self.opts.gyro_step_var;
        }
        if let Some((mean, var)) = self.opts.yaw_prior {
            c += crate::geometry::wrap_angle(s.yaw - mean).powi(2) / var;
        }
        if let Some(p) = &self.opts.keyframe_prior {
            let d = tilt_delta(&s.keyframe_tilt(), &p.mean);
            c += (d.transpose() * p.cov.try_inverse()? * d)[0];
        }
        Some(0.5 * c)
    }

    fn cov_cost(&self, cov: &Matrix3<f64>) -> Option<f64> {
        let chol = cov.cholesky()?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let k = self.accel_dirs.len() as f64;
        Some(0.5 * ((k + self.prior.dof + DIM + 1.0) * log_det + (self.prior.scale * chol.inverse()).trace()))
    }

    /// Gauss-Newton normal equations `(H, g)` at `s`.
    fn normal_equations(&self, s: &FusionState, cov_inv: &Matrix3<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = s.dim();
        let last = s.tilts.len() - 1;
        let mut h = DMatrix::zeros(n, n);
        let mut grad = DVector::zeros(n);
        let vis_idx = [0, 1, 2, 3, 4, 5, 4 + 2 * last, 5 + 2 * last];
        for (corr, tri) in self.corrs.iter().zip(self.tris) {
            let (r, j) = visual_residual_jacobian(s, corr, tri)?;
            let jtj = j.transpose() * j * self.vis_weight;
            let jtr = j.transpose() * r * self.vis_weight;
            for (a, &ia) in vis_idx.iter().enumerate() {
                grad[ia] += jtr[a];
                for (b, &ib) in vis_idx.iter().enumerate() {
                    h[(ia, ib)] += jtj[(a, b)];
                }
            }
        }
        let residuals = self.imu_residuals(s);
        for (k, r) in residuals.iter().enumerate() {
            let j = -gravity_in_body_jacobian(&s.tilts[k], &self.g);
            let o = 4 + 2 * k;
            let jw = j.transpose() * cov_inv;
            let mut block = h.fixed_view_mut::<2, 2>(o, o);
            block += jw * j;
            let mut gb = grad.fixed_rows_mut::<2>(o);
            gb += jw * r;
        }
        let w = 1.0 / self.opts.gyro_step_var;
        for k in 0..self.increments.len() {
            let r = self.coupling(s, k);
            let j0 = -(self.increments[k].inverse().matrix() * gravity_in_body_jacobian(&s.tilts[k], &self.g));
            let j1 = gravity_in_body_jacobian(&s.tilts[k + 1], &self.g);
            let o0 = 4 + 2 * k;
            let o1 = o0 + 2;
            let blocks = [(o0, j0), (o1, j1)];
            for &(oa, ja) in &blocks {
                let mut gb = grad.fixed_rows_mut::<2>(oa);
                gb += ja.transpose() * r * w;
                for &(ob, jb) in &blocks {
                    let mut hb = h.fixed_view_mut::<2, 2>(oa, ob);
                    hb += ja.transpose() * jb * w;
                }
            }
        }
        if let Some((mean, var)) = self.opts.yaw_prior {
            h[(0, 0)] += 1.0 / var;
            grad[0] += crate::geometry::wrap_angle(s.yaw - mean) / var;
        }
        if let Some(p) = &self.opts.keyframe_prior {
            let info = p
                .cov
                .try_inverse()
                .ok_or_else(|| Error::Config("keyframe tilt prior covariance is singular".into()))?;
            let d = tilt_delta(&s.keyframe_tilt(), &p.mean);
            let mut hb = h.fixed_view_mut::<2, 2>(4, 4);
            hb += info;
            let mut gb = grad.fixed_rows_mut::<2>(4);
            gb += info * d;
        }
        Ok((h, grad))
    }
}

fn tilt_delta(a: &Tilt, b: &Tilt) -> Vector2<f64> {
    Vector2::new(a.pitch - b.pitch, a.roll - b.roll)
}

fn covariance_update(p: &Problem<'_>, s: &FusionState) -> Result<Matrix3<f64>> {
    let res = p.imu_residuals(s);
    Ok(wishart_map_update(p.prior, &sample_covariance(&res)?, res.len()))
}

/// Jointly refine the relative pose, the tilt at every IMU instant and the
/// accelerometer residual covariance.
///
/// `imu` holds one sample per tilt in `init`; the gyro reading of sample `k`
/// links tilts `k` and `k + 1`. Each round takes one Gauss-Newton step with
/// backtracking on the state with the covariance fixed, then replaces the
/// covariance by its Wishart-MAP value. The covariance is seeded the same way
/// from `init`, so the joint objective never increases.
#[allow(clippy::too_many_arguments)]
pub fn bcd_solve(
    init: &FusionState,
    corrs: &[Correspondence],
    tris: &[TriPoint],
    imu: &[ImuSample],
    sigma_vis2: f64,
    prior: &WishartPrior,
    g: &GravityVector,
    opts: &BcdOptions,
) -> Result<BcdResult> {
    init.validate()?;
    if corrs.len() != tris.len() {
        return Err(Error::Config(format!(
            "{} correspondences but {} triangulated points",
            corrs.len(),
            tris.len()
        )));
    }
    if corrs.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: corrs.len(),
        });
    }
    if imu.len() != init.tilts.len() {
        return Err(Error::Config(format!(
            "{} IMU samples for {} attitude states",
            imu.len(),
            init.tilts.len()
        )));
    }
    if !(sigma_vis2 > 0.0) || !(opts.gyro_step_var > 0.0) {
        return Err(Error::Config("noise variances must be positive".into()));
    }
    check_stream(imu)?;
    let accel_dirs = imu
        .iter()
        .map(|s| normalize_accel(&s.accel))
        .collect::<Result<Vec<_>>>()?;
    let increments = imu
        .windows(2)
        .map(|w| gyro_increment(&w[0].gyro, w[1].time - w[0].time))
        .collect();
    let problem = Problem {
        corrs,
        tris,
        accel_dirs,
        increments,
        vis_weight: 1.0 / sigma_vis2,
        g: *g,
        opts,
        prior,
    };

    let mut state = init.clone();
    let mut cov = covariance_update(&problem, &state)?;
    let singular = || Error::DegenerateGeometry(f64::INFINITY);
    let mut cov_inv = cov.try_inverse().ok_or_else(singular)?;
    let joint = |s: &FusionState, c: &Matrix3<f64>, ci: &Matrix3<f64>| -> Result<f64> {
        let sc = problem.state_cost(s, ci).ok_or(Error::BehindCamera(0.0))?;
        Ok(sc + problem.cov_cost(c).ok_or_else(singular)?)
    };
    let mut costs = vec![joint(&state, &cov, &cov_inv)?];
    let mut degraded = false;
    let mut rounds = 0;
    let mut last_h = None;
    while rounds < opts.max_rounds {
        rounds += 1;
        let (h, grad) = problem.normal_equations(&state, &cov_inv)?;
        let Some(chol) = h.clone().cholesky() else {
            degraded = true;
            break;
        };
        let step = chol.solve(&(-&grad));
        last_h = Some(chol);
        let x0 = state.to_vector();
        let base = problem.state_cost(&state, &cov_inv).unwrap_or(f64::INFINITY);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = FusionState::from_vector(&(&x0 + &step * alpha));
            if let Some(c) = problem.state_cost(&cand, &cov_inv) {
                if c <= base {
                    accepted = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let moved = step.norm() * alpha;
        let stalled = accepted.is_none();
        if let Some(cand) = accepted {
            state = cand;
        }
        cov = covariance_update(&problem, &state)?;
        cov_inv = cov.try_inverse().ok_or_else(singular)?;
        costs.push(joint(&state, &cov, &cov_inv)?);
        if stalled || moved < opts.tolerance {
            break;
        }
    }

    // Posterior uncertainty at the final state.
    let (h, _) = problem.normal_equations(&state, &cov_inv)?;
    let cov_state = match h.cholesky().or(last_h) {
        Some(c) => c.inverse(),
        None => {
            degraded = true;
            DMatrix::from_diagonal_element(state.dim(), state.dim(), f64::INFINITY)
        }
    };
    let o = 4 + 2 * (state.tilts.len() - 1);
    let current_tilt_cov = cov_state.fixed_view::<2, 2>(o, o).into_owned();
    let yaw_var = cov_state[(0, 0)];
    Ok(BcdResult {
        state,
        imu_cov: cov,
        rounds,
        degraded,
        costs,
        current_tilt_cov,
        yaw_var,
    })
}
