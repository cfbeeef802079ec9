//! Five-point essential-matrix baseline (null space + action matrix),
//! wrapped in a plain RANSAC loop with Sampson scoring.
//!
//! Convention: `q^h^T E z^h = 0` with `E = [t]x R` for the keyframe-to-current
//! pose, the same as the epipolar lines in [`crate::geometry`].

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Rotation3, SMatrix, SVector, Vector2, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consensus::{required_iterations, RansacParams};
use crate::error::{Error, Result};
use crate::geometry::{homogeneous, PoseSE3};

/// Dense polynomial of total degree <= 3 in (x, y, z), indexed by exponents.
#[derive(Clone, Copy)]
struct Poly([[[f64; 4]; 4]; 4]);

impl Poly {
    fn zero() -> Self {
        Poly([[[0.0; 4]; 4]; 4])
    }

    fn linear(cx: f64, cy: f64, cz: f64, c1: f64) -> Self {
        let mut p = Self::zero();
        p.0[1][0][0] = cx;
        p.0[0][1][0] = cy;
        p.0[0][0][1] = cz;
        p.0[0][0][0] = c1;
        p
    }

    fn add(&self, o: &Poly) -> Poly {
        let mut r = *self;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    r.0[a][b][c] += o.0[a][b][c];
                }
            }
        }
        r
    }

    fn scale(&self, s: f64) -> Poly {
        let mut r = *self;
        r.0.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        r
    }

    /// Product, truncated at degree 3 (callers never exceed it).
    fn mul(&self, o: &Poly) -> Poly {
        let mut r = Self::zero();
        for a in 0..4 {
            for b in 0..4 - a {
                for c in 0..4 - a - b {
                    let u = self.0[a][b][c];
                    if u == 0.0 {
                        continue;
                    }
                    for d in 0..4 - a - b - c {
                        for e in 0..4 - a - b - c - d {
                            for f in 0..4 - a - b - c - d - e {
                                r.0[a + d][b + e][c + f] += u * o.0[d][e][f];
                            }
                        }
                    }
                }
            }
        }
        r
    }

    /// Coefficients in the elimination order.
    fn coefficients(&self) -> [f64; 20] {
        MONOMIALS.map(|(a, b, c)| self.0[a][b][c])
    }
}

/// Cubic monomials first, then the 10 monomials spanning the quotient ring.
const MONOMIALS: [(usize, usize, usize); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (1, 2, 0),
    (0, 3, 0),
    (2, 0, 1),
    (1, 1, 1),
    (0, 2, 1),
    (1, 0, 2),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (0, 2, 0),
    (1, 0, 1),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

/// 4-dimensional null space of the 5x9 epipolar design matrix.
fn null_basis(q: &[Vector2<f64>], z: &[Vector2<f64>]) -> Result<[Matrix3<f64>; 4]> {
    let mut design = SMatrix::<f64, 9, 9>::zeros();
    for (row, (qi, zi)) in q.iter().zip(z).enumerate() {
        let (qh, zh) = (homogeneous(qi), homogeneous(zi));
        for i in 0..3 {
            for j in 0..3 {
                design[(row, 3 * i + j)] = qh[i] * zh[j];
            }
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateSample)?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = &svd.singular_values;
    if !(s[order[4]] > 1e-10 * s[order[0]]) {
        return Err(Error::DegenerateSample);
    }
    Ok(std::array::from_fn(|k| {
        let row = v_t.row(order[5 + k]);
        Matrix3::from_fn(|i, j| row[3 * i + j])
    }))
}

/// All essential matrices consistent with five correspondences.
pub fn five_point(q: &[Vector2<f64>], z: &[Vector2<f64>]) -> Result<Vec<Matrix3<f64>>> {
    if q.len() != 5 || z.len() != 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            got: q.len().min(z.len()),
        });
    }
    let [bx, by, bz, bw] = null_basis(q, z)?;
    let e: [[Poly; 3]; 3] =
        std::array::from_fn(|i| std::array::from_fn(|j| Poly::linear(bx[(i, j)], by[(i, j)], bz[(i, j)], bw[(i, j)])));

    let mut rows: Vec<[f64; 20]> = Vec::with_capacity(10);
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).add(&e[1][2].mul(&e[2][1]).scale(-1.0)))
        .add(&e[0][1].mul(&e[1][2].mul(&e[2][0]).add(&e[1][0].mul(&e[2][2]).scale(-1.0))))
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).add(&e[1][1].mul(&e[2][0]).scale(-1.0))));
    rows.push(det.coefficients());
    // E E^T, then 2 E E^T E - tr(E E^T) E.
    let eet: [[Poly; 3]; 3] = std::array::from_fn(|i| {
        std::array::from_fn(|j| (0..3).fold(Poly::zero(), |acc, k| acc.add(&e[i][k].mul(&e[j][k]))))
    });
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    #[allow(clippy::needless_range_loop)]
    for i in 0..3 {
        for j in 0..3 {
            let prod = (0..3).fold(Poly::zero(), |acc, k| acc.add(&eet[i][k].mul(&e[k][j])));
            rows.push(prod.scale(2.0).add(&trace.mul(&e[i][j]).scale(-1.0)).coefficients());
        }
    }
    let m = DMatrix::from_fn(10, 20, |r, c| rows[r][c]);
    let lead = m.columns(0, 10).into_owned();
    let tail = m.columns(10, 10).into_owned();
    let reduced = lead.lu().solve(&tail).ok_or(Error::DegenerateSample)?;

    // Multiplication by x on the quotient basis [x2, xy, y2, xz, yz, z2, x, y, z, 1].
    let mut action = SMatrix::<f64, 10, 10>::zeros();
    for (row, src) in [(0, 0), (1, 1), (2, 2), (3, 4), (4, 5), (5, 7)] {
        for c in 0..10 {
            action[(row, c)] = -reduced[(src, c)];
        }
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 3)] = 1.0;
    action[(9, 6)] = 1.0;
    if !action.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateSample);
    }

    let mut out = Vec::new();
    for lambda in action.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-8 * lambda.re.abs().max(1.0) {
            continue;
        }
        let shifted = action - SMatrix::<f64, 10, 10>::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let Some(v_t) = svd.v_t else { continue };
        let k = svd.singular_values.imin();
        let v: SVector<f64, 10> = v_t.row(k).transpose();
        if v[9].abs() < 1e-12 {
            continue;
        }
        let (x, y, zz) = (v[6] / v[9], v[7] / v[9], v[8] / v[9]);
        let em = bx * x + by * y + bz * zz + bw;
        let nrm = em.norm();
        if nrm > 0.0 && nrm.is_finite() {
            out.push(em / nrm);
        }
    }
    Ok(out)
}

/// Squared Sampson distance of `(q, z)` under `E`.
pub fn sampson_sq(e: &Matrix3<f64>, q: &Vector2<f64>, z: &Vector2<f64>) -> f64 {
    let (qh, zh) = (homogeneous(q), homogeneous(z));
    let ez = e * zh;
    let etq = e.transpose() * qh;
    let num = qh.dot(&ez);
    let den = ez.x * ez.x + ez.y * ez.y + etq.x * etq.x + etq.y * etq.y;
    if den > 0.0 {
        num * num / den
    } else {
        f64::INFINITY
    }
}

/// Depths of `z` (keyframe) and `q` (current) under `pose`.
fn depths(pose: &PoseSE3, q: &Vector2<f64>, z: &Vector2<f64>) -> Option<(f64, f64)> {
    let rz = pose.rotation * homogeneous(z);
    let qh = homogeneous(q);
    // lambda1 * R z - lambda2 * q = -t in the least-squares sense.
    let a = nalgebra::Matrix3x2::from_columns(&[rz, -qh]);
    let ata = a.transpose() * a;
    let sol = ata.try_inverse()? * a.transpose() * (-pose.translation);
    Some((sol[0], sol[1]))
}

/// Pose with unit translation encoded by `E`, picked among the four
/// decompositions by the number of points in front of both cameras.
pub fn decompose_essential(e: &Matrix3<f64>, q: &[Vector2<f64>], z: &[Vector2<f64>]) -> Result<PoseSE3> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::DegenerateSample);
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, PoseSE3)> = None;
    for r in [u * w * v_t, u * w.transpose() * v_t] {
        for sign in [1.0, -1.0] {
            let pose = PoseSE3::new(Rotation3::from_matrix_unchecked(r), t * sign);
            let front = q
                .iter()
                .zip(z)
                .filter(|(qi, zi)| depths(&pose, qi, zi).is_some_and(|(a, b)| a > 0.0 && b > 0.0))
                .count();
            if best.as_ref().is_none_or(|(c, _)| front > *c) {
                best = Some((front, pose));
            }
        }
    }
    best.map(|(_, p)| p).ok_or(Error::DegenerateSample)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FivePointResult {
    /// Rotation and unit-length translation.
    pub pose: PoseSE3,
    pub essential: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
    pub elapsed: Duration,
}

/// RANSAC over five-point hypotheses using only the keyframe-left and
/// current observations, with inliers `sqrt(sampson) <= threshold`.
pub fn ransac_five_point(
    q: &[Vector2<f64>],
    z: &[Vector2<f64>],
    threshold: f64,
    params: &RansacParams,
) -> Result<FivePointResult> {
    let start = Instant::now();
    let n = q.len();
    if n < 5 || z.len() != n {
        return Err(Error::InsufficientData {
            needed: 5,
            got: n.min(z.len()),
        });
    }
    let thr2 = threshold * threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, Matrix3<f64>, Vec<bool>)> = None;
    let mut budget = params.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let idx = index::sample(&mut rng, n, 5).into_vec();
        let sq: Vec<_> = idx.iter().map(|&i| q[i]).collect();
        let sz: Vec<_> = idx.iter().map(|&i| z[i]).collect();
        let Ok(models) = five_point(&sq, &sz) else {
            continue;
        };
        for e in models {
            let d: Vec<f64> = q.iter().zip(z).map(|(qi, zi)| sampson_sq(&e, qi, zi)).collect();
            let mask: Vec<bool> = d.iter().map(|v| *v <= thr2).collect();
            let count = mask.iter().filter(|b| **b).count();
            let cost: f64 = d.iter().filter(|v| **v <= thr2).sum();
            let better = match &best {
                None => count >= 5,
                Some((c, bc, _, _)) => count > *c || (count == *c && cost < *bc),
            };
            if better {
                budget = required_iterations(params.confidence, count as f64 / n as f64, 5).min(params.max_iterations);
                best = Some((count, cost, e, mask));
            }
        }
    }
    let Some((count, _, essential, inliers)) = best else {
        return Err(Error::ConsensusFailure { iterations, best: 0 });
    };
    let in_q: Vec<_> = q.iter().zip(&inliers).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    let in_z: Vec<_> = z.iter().zip(&inliers).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    debug_assert_eq!(in_q.len(), count);
    let pose = decompose_essential(&essential, &in_q, &in_z)?;
    Ok(FivePointResult {
        pose,
        essential,
        inliers,
        iterations,
        elapsed: start.elapsed(),
    })
}

/// Angle between two translation directions (rad).
pub fn direction_error(estimate: &Vector3<f64>, truth: &Vector3<f64>) -> f64 {
    let (a, b) = (estimate.norm(), truth.norm());
    if a == 0.0 || b == 0.0 {
        return std::f64::consts::PI;
    }
    (estimate.dot(truth) / (a * b)).clamp(-1.0, 1.0).acos()
}
