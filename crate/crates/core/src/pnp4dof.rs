//! 4-DOF relative pose from triangulated keyframe points and current-frame
//! observations when roll and pitch are known.
//!
//! With `rho = R_rp p` the projection `q = h(R_yaw(psi) rho + t)` is linear in
//! `x = [cos psi, sin psi, t]`:
//!
//! ```text
//! [ rho1   rho2  1  0  -q1 ] x = rho3 q1
//! [ rho2  -rho1  0  1  -q2 ] x = rho3 q2
//! ```
//!
//! Noise in `rho` enters both sides, so plain least squares is biased. The
//! bias-eliminated solve subtracts the expected noise products from the
//! normal equations. A Gauss-Newton step on the epipolar distances then
//! brings the estimate to the efficiency bound.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix5, Rotation3, Vector2, Vector3, Vector4, Vector5};

use crate::error::{Error, Result};
use crate::geometry::{homogeneous, rot_yaw, rot_yaw_deriv, skew, Pose4, StereoRig};
use crate::stereo::{triangulate, Correspondence, TriPoint};

/// Normal matrices at or above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Minimum number of points for the linear solvers.
pub const MIN_POINTS: usize = 3;

/// Lifted state `[cos psi, sin psi, t1, t2, t3]`.
pub type StateVec5 = Vector5<f64>;

/// A keyframe point rotated by the known roll-pitch factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreRotated {
    pub rho: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// Stacked linear system `A x = b` with the per-point inputs kept for the
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub rho_cov: Vec<Matrix3<f64>>,
    pub q: Vec<Vector2<f64>>,
}

impl LinearSystem {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Expected noise products `E[dA^T dA]/n` and `E[dA^T db]/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasTerms {
    pub g1: Matrix5<f64>,
    pub g2: Vector5<f64>,
}

pub fn prerotate(points: &[TriPoint], r_rp: &Rotation3<f64>) -> Vec<PreRotated> {
    let r = r_rp.matrix();
    points
        .iter()
        .map(|tp| {
            let cov = r * tp.cov * r.transpose();
            PreRotated {
                rho: r * tp.p,
                cov: (cov + cov.transpose()) * 0.5,
            }
        })
        .collect()
}

/// The two rows contributed by one point.
pub fn point_rows(rho: &Vector3<f64>, q: &Vector2<f64>) -> ([f64; 5], [f64; 5], Vector2<f64>) {
    (
        [rho.x, rho.y, 1.0, 0.0, -q.x],
        [rho.y, -rho.x, 0.0, 1.0, -q.y],
        q * rho.z,
    )
}

pub fn build_linear_system(pre: &[PreRotated], q: &[Vector2<f64>]) -> Result<LinearSystem> {
    if pre.len() != q.len() {
        return Err(Error::Config(format!(
            "{} points but {} observations",
            pre.len(),
            q.len()
        )));
    }
    if pre.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: pre.len(),
        });
    }
    let n = pre.len();
    let mut a = DMatrix::zeros(2 * n, 5);
    let mut b = DVector::zeros(2 * n);
    for (i, (p, qi)) in pre.iter().zip(q).enumerate() {
        let (r0, r1, bi) = point_rows(&p.rho, qi);
        for k in 0..5 {
            a[(2 * i, k)] = r0[k];
            a[(2 * i + 1, k)] = r1[k];
        }
        b[2 * i] = bi.x;
        b[2 * i + 1] = bi.y;
    }
    Ok(LinearSystem {
        a,
        b,
        rho_cov: pre.iter().map(|p| p.cov).collect(),
        q: q.to_vec(),
    })
}

/// Noise-product expectations for the stencil above.
///
/// `G1` depends only on the average in-plane variance. `G2` couples the
/// depth noise in `b` with the in-plane noise in `A`:
/// `G2[0..2] = mean( S13 * (q1, -q2) + S23 * (q2, q1) )`.
pub fn bias_terms(sys: &LinearSystem) -> BiasTerms {
    let n = sys.len().max(1) as f64;
    let mut planar = 0.0;
    let mut g2 = Vector5::zeros();
    for (c, q) in sys.rho_cov.iter().zip(&sys.q) {
        planar += c[(0, 0)] + c[(1, 1)];
        let (s13, s23) = (c[(0, 2)], c[(1, 2)]);
        g2[0] += s13 * q.x + s23 * q.y;
        g2[1] += -s13 * q.y + s23 * q.x;
    }
    let mut g1 = Matrix5::zeros();
    g1[(0, 0)] = planar / n;
    g1[(1, 1)] = planar / n;
    BiasTerms { g1, g2: g2 / n }
}

/// Solve a symmetric positive-definite-ish 5x5 system by SVD after Jacobi
/// equilibration, rejecting ill-conditioned matrices.
fn solve_normal(m: &Matrix5<f64>, rhs: &Vector5<f64>) -> Result<Vector5<f64>> {
    let diag = m.diagonal();
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::DegenerateGeometry(f64::INFINITY));
    }
    let scale = diag.map(|d| 1.0 / d.sqrt());
    let scaled = Matrix5::from_fn(|i, j| m[(i, j)] * scale[i] * scale[j]);
    let svd = scaled.svd(true, true);
    let sv = svd.singular_values;
    let cond = sv.max() / sv.min();
    if !(cond < MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let y = svd
        .solve(&rhs.component_mul(&scale), 0.0)
        .map_err(|_| Error::DegenerateGeometry(cond))?;
    Ok(y.component_mul(&scale))
}

/// Ordinary least squares, solved by SVD of the column-scaled design matrix.
pub fn solve_ls(sys: &LinearSystem) -> Result<StateVec5> {
    let scale: Vec<f64> = (0..5)
        .map(|k| {
            let nrm = sys.a.column(k).norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                0.0
            }
        })
        .collect();
    if scale.contains(&0.0) {
        return Err(Error::DegenerateGeometry(f64::INFINITY));
    }
    let mut a = sys.a.clone();
    for (k, s) in scale.iter().enumerate() {
        a.column_mut(k).scale_mut(*s);
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let cond = (sv.max() / sv.min()).powi(2);
    if !(cond < MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let y = svd.solve(&sys.b, 0.0).map_err(|_| Error::DegenerateGeometry(cond))?;
    Ok(Vector5::from_fn(|k, _| y[k] * scale[k]))
}

/// Bias-eliminated solve `(A^T A/n - G1) x = A^T b/n - G2`.
pub fn solve_be(sys: &LinearSystem) -> Result<StateVec5> {
    let n = sys.len() as f64;
    let terms = bias_terms(sys);
    let ata: Matrix5<f64> = (sys.a.transpose() * &sys.a).fixed_view::<5, 5>(0, 0).into_owned();
    let atb: Vector5<f64> = (sys.a.transpose() * &sys.b).fixed_rows::<5>(0).into_owned();
    solve_normal(&(ata / n - terms.g1), &(atb / n - terms.g2))
}

/// Recover yaw and translation from the lifted state.
pub fn normalize_state(x: &StateVec5) -> Result<Pose4> {
    let r = x[0].hypot(x[1]);
    if !(r > 1e-9) {
        return Err(Error::AmbiguousYaw(r));
    }
    Ok(Pose4::new(x[1].atan2(x[0]), Vector3::new(x[2], x[3], x[4])))
}

pub fn lift_state(pose: &Pose4) -> StateVec5 {
    Vector5::new(pose.yaw.cos(), pose.yaw.sin(), pose.t.x, pose.t.y, pose.t.z)
}

/// Triangulate every correspondence's keyframe stereo pair.
pub fn triangulate_all(corrs: &[Correspondence], rig: &StereoRig, sigma2: f64) -> Result<Vec<TriPoint>> {
    corrs.iter().map(|c| triangulate(&c.z, &c.y, rig, sigma2)).collect()
}

fn linear_system_for(
    corrs: &[Correspondence],
    r_rp: &Rotation3<f64>,
    rig: &StereoRig,
    sigma2: f64,
) -> Result<LinearSystem> {
    let tris = triangulate_all(corrs, rig, sigma2)?;
    let pre = prerotate(&tris, r_rp);
    let q: Vec<_> = corrs.iter().map(|c| c.q).collect();
    build_linear_system(&pre, &q)
}

/// Triangulate, pre-rotate and solve by ordinary least squares.
pub fn estimate_ls(corrs: &[Correspondence], r_rp: &Rotation3<f64>, rig: &StereoRig, sigma2: f64) -> Result<Pose4> {
    normalize_state(&solve_ls(&linear_system_for(corrs, r_rp, rig, sigma2)?)?)
}

/// Triangulate, pre-rotate and solve with bias elimination.
pub fn estimate_be(corrs: &[Correspondence], r_rp: &Rotation3<f64>, rig: &StereoRig, sigma2: f64) -> Result<Pose4> {
    normalize_state(&solve_be(&linear_system_for(corrs, r_rp, rig, sigma2)?)?)
}

/// Signed distance of `pt` to the epipolar line of `qh` under `(r, t)`, and
/// its derivatives with respect to yaw and `t`.
///
/// `dr` and `dt_dyaw` are the yaw derivatives of `r` and `t`; the derivative
/// of `t` with respect to the translation state is the identity.
fn dist_and_grad(
    qh: &Vector3<f64>,
    pt: &Vector2<f64>,
    r: &Matrix3<f64>,
    dr: &Matrix3<f64>,
    t: &Vector3<f64>,
    dt_dyaw: &Vector3<f64>,
) -> Result<(f64, Vector4<f64>)> {
    let m = qh.cross(t);
    let l = r.transpose() * m;
    let s = l.x.hypot(l.y);
    if !(s > 0.0) {
        return Err(Error::DegenerateLine(s));
    }
    let ph = homogeneous(pt);
    let num = l.dot(&ph);
    let d = num / s;
    let grad_of = |dl: Vector3<f64>| dl.dot(&ph) / s - num * (l.x * dl.x + l.y * dl.y) / (s * s * s);
    let dl_yaw = dr.transpose() * m + r.transpose() * qh.cross(dt_dyaw);
    let dl_t = r.transpose() * skew(qh);
    Ok((
        d,
        Vector4::new(
            grad_of(dl_yaw),
            grad_of(dl_t.column(0).into_owned()),
            grad_of(dl_t.column(1).into_owned()),
            grad_of(dl_t.column(2).into_owned()),
        ),
    ))
}

/// Per-view geometry shared by every correspondence.
struct Views {
    r_left: Matrix3<f64>,
    dr_left: Matrix3<f64>,
    t_left: Vector3<f64>,
    r_right: Matrix3<f64>,
    dr_right: Matrix3<f64>,
    t_right: Vector3<f64>,
    dt_right: Vector3<f64>,
}

impl Views {
    fn new(pose: &Pose4, r_rp: &Rotation3<f64>, rig: &StereoRig) -> Result<Self> {
        if pose.t.norm() == 0.0 {
            return Err(Error::DegenerateEpipolar);
        }
        let rp = r_rp.matrix();
        let r_left = rot_yaw(pose.yaw).matrix() * rp;
        let dr_left = rot_yaw_deriv(pose.yaw) * rp;
        let re_t = rig.extrinsic.rotation.matrix().transpose();
        let te = rig.extrinsic.translation;
        let r_right = r_left * re_t;
        let dr_right = dr_left * re_t;
        let t_right = pose.t - r_right * te;
        if t_right.norm() == 0.0 {
            return Err(Error::DegenerateEpipolar);
        }
        Ok(Self {
            r_left,
            dr_left,
            t_left: pose.t,
            r_right,
            dr_right,
            t_right,
            dt_right: -(dr_right * te),
        })
    }

    /// Larger absolute epipolar distance, without derivatives.
    fn worst_distance(&self, c: &Correspondence) -> f64 {
        let qh = homogeneous(&c.q);
        let dist = |pt: &Vector2<f64>, r: &Matrix3<f64>, t: &Vector3<f64>| {
            let l = r.transpose() * qh.cross(t);
            let s = l.x.hypot(l.y);
            if s > 0.0 {
                (l.dot(&homogeneous(pt)) / s).abs()
            } else {
                f64::INFINITY
            }
        };
        dist(&c.z, &self.r_left, &self.t_left).max(dist(&c.y, &self.r_right, &self.t_right))
    }

    fn residuals(&self, c: &Correspondence) -> Result<[(f64, Vector4<f64>); 2]> {
        let qh = homogeneous(&c.q);
        Ok([
            dist_and_grad(&qh, &c.z, &self.r_left, &self.dr_left, &self.t_left, &Vector3::zeros())?,
            dist_and_grad(&qh, &c.y, &self.r_right, &self.dr_right, &self.t_right, &self.dt_right)?,
        ])
    }
}

/// Signed epipolar distances `(d_left, d_right)` of one correspondence.
pub fn epipolar_residuals(
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    c: &Correspondence,
    rig: &StereoRig,
) -> Result<(f64, f64)> {
    let [l, r] = Views::new(pose, r_rp, rig)?.residuals(c)?;
    Ok((l.0, r.0))
}

/// Larger of the two absolute epipolar distances per correspondence;
/// infinite where a distance is undefined.
pub fn worst_epipolar_distances(
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    corrs: &[Correspondence],
    rig: &StereoRig,
) -> Vec<f64> {
    match Views::new(pose, r_rp, rig) {
        Ok(views) => corrs.iter().map(|c| views.worst_distance(c)).collect(),
        Err(_) => vec![f64::INFINITY; corrs.len()],
    }
}

/// Stacked residuals `[d_L1, d_R1, d_L2, ...]` and their Jacobian with
/// respect to `(yaw, t1, t2, t3)`.
pub fn residual_jacobian(
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    corrs: &[Correspondence],
    rig: &StereoRig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let views = Views::new(pose, r_rp, rig)?;
    let mut r = DVector::zeros(2 * corrs.len());
    let mut j = DMatrix::zeros(2 * corrs.len(), 4);
    for (i, c) in corrs.iter().enumerate() {
        for (k, (d, g)) in views.residuals(c)?.into_iter().enumerate() {
            r[2 * i + k] = d;
            j.row_mut(2 * i + k).copy_from(&g.transpose());
        }
    }
    Ok((r, j))
}

/// Sum of squared epipolar distances in both keyframe images.
pub fn ml_cost(pose: &Pose4, r_rp: &Rotation3<f64>, corrs: &[Correspondence], rig: &StereoRig) -> Result<f64> {
    let views = Views::new(pose, r_rp, rig)?;
    corrs.iter().try_fold(0.0, |acc, c| {
        let [l, r] = views.residuals(c)?;
        Ok(acc + l.0 * l.0 + r.0 * r.0)
    })
}

/// `J^T J` of the epipolar residuals, the 4x4 Fisher information up to `1/sigma^2`.
pub fn information_matrix(
    pose: &Pose4,
    r_rp: &Rotation3<f64>,
    corrs: &[Correspondence],
    rig: &StereoRig,
) -> Result<Matrix4<f64>> {
    let (_, j) = residual_jacobian(pose, r_rp, corrs, rig)?;
    Ok((j.transpose() * &j).fixed_view::<4, 4>(0, 0).into_owned())
}

/// Least-squares step `argmin |J d + r|`, by SVD of the column-scaled Jacobian.
fn gauss_newton_step(r: &DVector<f64>, j: &DMatrix<f64>) -> Result<Vector4<f64>> {
    let mut js = j.clone();
    let mut scale = [0.0; 4];
    for (k, s) in scale.iter_mut().enumerate() {
        let nrm = js.column(k).norm();
        if !(nrm > 0.0) {
            return Err(Error::DegenerateGeometry(f64::INFINITY));
        }
        *s = 1.0 / nrm;
        js.column_mut(k).scale_mut(*s);
    }
    let svd = js.svd(true, true);
    let sv = &svd.singular_values;
    let cond = (sv.max() / sv.min()).powi(2);
    if !(cond < MAX_CONDITION) {
        return Err(Error::DegenerateGeometry(cond));
    }
    let y = svd.solve(&(-r), 0.0).map_err(|_| Error::DegenerateGeometry(cond))?;
    Ok(Vector4::from_fn(|k, _| y[k] * scale[k]))
}

/// `steps` plain Gauss-Newton iterations on the epipolar cost from `init`.
pub fn gn_refine(
    init: &Pose4,
    r_rp: &Rotation3<f64>,
    corrs: &[Correspondence],
    rig: &StereoRig,
    steps: usize,
) -> Result<Pose4> {
    if corrs.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: corrs.len(),
        });
    }
    if !init.yaw.is_finite() || !init.t.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("non-finite initial pose".into()));
    }
    let mut pose = *init;
    for _ in 0..steps {
        let (r, j) = residual_jacobian(&pose, r_rp, corrs, rig)?;
        let delta = gauss_newton_step(&r, &j)?;
        pose = Pose4::new(pose.yaw + delta[0], pose.t + delta.fixed_rows::<3>(1));
    }
    Ok(pose)
}
