//! Transform estimation.
//!
//! [`register_iclk`] aligns two clouds by driving the difference of their
//! global descriptors to zero with inverse-compositional Lucas-Kanade: the
//! Jacobian is evaluated once on the target and every increment is composed
//! on the left of the running estimate. [`register_icp`] is the classical
//! point-to-point ICP baseline.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{self, NeighborIndex, PointCloud};
use crate::error::{Error, Result};
use crate::geom3d::{self, RigidTransform, Twist};
use crate::linalg::{self, Vec3};
use crate::model::Model;

/// Anything that maps a point set to a fixed-length descriptor.
pub trait DescriptorFn {
    fn descriptor(&self, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl DescriptorFn for Model {
    fn descriptor(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.encode_points(points)?.0)
    }
}

impl<T: DescriptorFn + ?Sized> DescriptorFn for &T {
    fn descriptor(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        (**self).descriptor(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once the max-norm of the increment falls below this.
    pub delta_threshold: f64,
    /// Finite-difference step per twist coordinate for the Jacobian.
    pub jacobian_step: f64,
    /// Added to the diagonal of `J^T J`.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iterations: 10, delta_threshold: 1e-7, jacobian_step: 1e-2, damping: 1e-9 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.delta_threshold > 0.0) || !(self.jacobian_step > 0.0) || !(self.damping >= 0.0) {
            return Err(Error::invalid("solver thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Estimate mapping the source onto the target.
    pub transform: RigidTransform,
    pub iterations_used: usize,
    /// Residual norm before the first iteration and after each one.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Dense `K x 6` Jacobian, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn new(rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * 6 {
            return Err(Error::LengthMismatch { left: rows * 6, right: data.len() });
        }
        Ok(Jacobian { rows, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * 6 + c]
    }
}

fn twist_basis(i: usize, scale: f64) -> Twist {
    let mut w = [0.0; 6];
    w[i] = scale;
    Twist(w)
}

/// Jacobian and base descriptor `psi(Y)` in one pass (7 descriptor calls).
fn jacobian_and_base<E: DescriptorFn + ?Sized>(enc: &E, target: &[Vec3], step: f64) -> Result<(Jacobian, Vec<f64>)> {
    let base = enc.descriptor(target)?;
    let k = base.len();
    let mut data = vec![0.0; k * 6];
    for i in 0..6 {
        let warp = geom3d::exp_se3(&twist_basis(i, -step));
        let moved = warp.apply_points(target);
        let d = enc.descriptor(&moved)?;
        if d.len() != k {
            return Err(Error::LengthMismatch { left: k, right: d.len() });
        }
        for r in 0..k {
            data[r * 6 + i] = (d[r] - base[r]) / step;
        }
    }
    Ok((Jacobian { rows: k, data }, base))
}

/// Forward-difference approximation of `d psi(exp(-w) Y) / dw` at `w = 0`.
pub fn compute_jacobian<E: DescriptorFn + ?Sized>(enc: &E, target: &PointCloud, step: f64) -> Result<Jacobian> {
    if !(step > 0.0) {
        return Err(Error::invalid("jacobian step must be positive"));
    }
    Ok(jacobian_and_base(enc, target.points(), step)?.0)
}

/// Solves `(J^T J + damping I) dw = J^T residual`.
pub fn iclk_increment(jac: &Jacobian, residual: &[f64], damping: f64) -> Result<Twist> {
    if residual.len() != jac.rows {
        return Err(Error::LengthMismatch { left: jac.rows, right: residual.len() });
    }
    if jac.data.iter().chain(residual).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobian or residual".into()));
    }
    let mut a = [0.0; 36];
    let mut b = [0.0; 6];
    for (r, &res) in residual.iter().enumerate() {
        let row = &jac.data[r * 6..(r + 1) * 6];
        for i in 0..6 {
            b[i] += row[i] * res;
            for j in 0..6 {
                a[i * 6 + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..6 {
        a[i * 6 + i] += damping;
    }
    let x = linalg::cholesky_solve(&a, 6, &b).ok_or(Error::SingularSystem)?;
    Ok(Twist([x[0], x[1], x[2], x[3], x[4], x[5]]))
}

fn residual_of(current: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
    let r: Vec<f64> = current.iter().zip(target).map(|(a, b)| a - b).collect();
    let n = linalg::sqrt(r.iter().map(|v| v * v).sum());
    (r, n)
}

/// Inverse-compositional Lucas-Kanade over descriptors, starting from the
/// identity.
pub fn register_iclk<E: DescriptorFn + ?Sized>(
    enc: &E,
    source: &PointCloud,
    target: &PointCloud,
    cfg: &SolverConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let (jac, target_desc) = jacobian_and_base(enc, target.points(), cfg.jacobian_step)?;
    let mut estimate = RigidTransform::IDENTITY;
    let (mut residual, norm0) = residual_of(&enc.descriptor(source.points())?, &target_desc);
    let mut history = vec![norm0];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let dw = iclk_increment(&jac, &residual, cfg.damping)?;
        estimate = geom3d::compose(&geom3d::exp_se3(&dw), &estimate).renormalized(1e-9);
        iterations += 1;
        let moved = estimate.apply_points(source.points());
        let (r, n) = residual_of(&enc.descriptor(&moved)?, &target_desc);
        residual = r;
        history.push(n);
        if dw.norm_inf() < cfg.delta_threshold {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult { transform: estimate, iterations_used: iterations, residual_history: history, converged })
}

/// Least-squares rigid fit `dst ~ R src + t` (Kabsch with reflection
/// correction).
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch { left: src.len(), right: dst.len() });
    }
    if src.len() < 3 {
        return Err(Error::TooFewPoints { needed: 2, got: src.len() });
    }
    let cs = cloud::centroid(src);
    let cd = cloud::centroid(dst);
    let mut h = [[0.0; 3]; 3];
    for (s, d) in src.iter().zip(dst) {
        let a = linalg::sub(*s, cs);
        let b = linalg::sub(*d, cd);
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    let svd = linalg::svd3(&h);
    if !(svd.s[0] > 0.0) || svd.s[1] <= 1e-12 * svd.s[0] {
        return Err(Error::DegenerateCorrespondences);
    }
    let ut = linalg::transpose(&svd.u);
    let mut r = linalg::mat_mul(&svd.v, &ut);
    if linalg::det(&r) < 0.0 {
        let mut v = svd.v;
        for row in v.iter_mut() {
            row[2] = -row[2];
        }
        r = linalg::mat_mul(&v, &ut);
    }
    let t = linalg::sub(cd, linalg::mat_vec(&r, cs));
    Ok(RigidTransform::new(r, t))
}

/// Point-to-point ICP from the identity. Stops when the mean squared
/// correspondence distance improves by less than `tol` or after `max_iters`.
/// The residual history holds root-mean-square distances.
pub fn register_icp(source: &PointCloud, target: &PointCloud, max_iters: usize, tol: f64) -> Result<RegistrationResult> {
    register_icp_from(source, target, &RigidTransform::IDENTITY, max_iters, tol)
}

pub fn register_icp_from(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    max_iters: usize,
    tol: f64,
) -> Result<RegistrationResult> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::TooFewPoints { needed: 2, got: source.len().min(target.len()) });
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    let index = NeighborIndex::new(target.points());
    let src = source.points();
    let tgt = target.points();
    let mse_of = |t: &RigidTransform| -> (f64, Vec<Vec3>) {
        let mut total = 0.0;
        let mut matched = Vec::with_capacity(src.len());
        for p in src {
            let (j, d) = index.nearest(t.apply_point(*p));
            total += d * d;
            matched.push(tgt[j]);
        }
        (total / src.len() as f64, matched)
    };
    let mut estimate = *init;
    let (mut mse, mut matched) = mse_of(&estimate);
    let mut history = vec![linalg::sqrt(mse)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        estimate = fit_rigid(src, &matched)?;
        iterations += 1;
        let (next, m) = mse_of(&estimate);
        history.push(linalg::sqrt(next));
        let improvement = mse - next;
        mse = next;
        matched = m;
        if improvement < tol {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult { transform: estimate, iterations_used: iterations, residual_history: history, converged })
}
