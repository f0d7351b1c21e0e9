//! SE(3) geometry.
//!
//! Rigid motions are parameterized by twists `w = (omega, v)`: the first three
//! entries are an axis-angle rotation vector, the last three drive the
//! translation through the left Jacobian `V(omega)`. Euler angles appear only
//! where transforms are sampled or reported, using the intrinsic Z-Y-X
//! convention `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::linalg::{self, hat, mat_add, mat_mul, mat_scale, mat_vec, transpose, Mat3, Vec3, IDENTITY3};

/// Below this rotation angle exp/log switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Six-vector `(omega, v)`: rotation vector in radians, then translation part.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist(pub [f64; 6]);

impl Twist {
    pub const ZERO: Twist = Twist([0.0; 6]);

    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Twist([
            rotation[0],
            rotation[1],
            rotation[2],
            translation[0],
            translation[1],
            translation[2],
        ])
    }

    pub fn rotation(&self) -> Vec3 {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[3], self.0[4], self.0[5]]
    }

    /// Max-norm, the stopping metric of the IC-LK loop.
    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(linalg::abs(*v)))
    }

    pub fn scaled(&self, s: f64) -> Twist {
        let mut out = self.0;
        out.iter_mut().for_each(|v| *v *= s);
        Twist(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Rotation plus translation; maps `x` to `R x + t`. Serializes as the
/// 12-real array of [`RigidTransform::to_array`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 12]", from = "[f64; 12]")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl From<RigidTransform> for [f64; 12] {
    fn from(t: RigidTransform) -> Self {
        t.to_array()
    }
}

impl From<[f64; 12]> for RigidTransform {
    fn from(a: [f64; 12]) -> Self {
        RigidTransform::from_array(&a)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: IDENTITY3,
        translation: [0.0; 3],
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform::new(IDENTITY3, t)
    }

    pub fn from_rotation(r: Mat3) -> Self {
        RigidTransform::new(r, [0.0; 3])
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = linalg::norm(axis);
        let w = linalg::scale(axis, angle / n);
        exp_se3(&Twist::new(w, [0.0; 3]))
    }

    #[inline]
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        linalg::add(mat_vec(&self.rotation, p), self.translation)
    }

    #[inline]
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    pub fn apply_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply_point(*p)).collect()
    }

    /// Row-major `R` followed by `t`, the 12-real serialization of transforms.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2], t[0], t[1],
            t[2],
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        RigidTransform::new(
            [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]],
            [a[9], a[10], a[11]],
        )
    }

    /// Largest deviation from `R^T R = I` and `det R = 1`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        linalg::max_abs_diff(&rtr, &IDENTITY3).max(linalg::abs(linalg::det(&self.rotation) - 1.0))
    }

    pub fn is_valid(&self) -> bool {
        self.rotation.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite())
            && self.orthonormality_error() < 1e-9
    }

    /// Projects the rotation back onto SO(3) when it has drifted past `tol`.
    pub fn renormalized(mut self, tol: f64) -> Self {
        if self.orthonormality_error() > tol {
            self.rotation = linalg::nearest_rotation(&self.rotation);
        }
        self
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let t = (0..3).fold(0.0f64, |m, i| m.max(linalg::abs(self.translation[i] - other.translation[i])));
        linalg::max_abs_diff(&self.rotation, &other.rotation).max(t)
    }
}

/// Coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

/// Closed-form exponential of a twist (Rodrigues rotation and V-matrix
/// translation coupling).
pub fn exp_se3(w: &Twist) -> RigidTransform {
    let omega = w.rotation();
    let theta = linalg::norm(omega);
    let (a, b, c) = so3_coefficients(theta);
    let k = hat(omega);
    let k2 = mat_mul(&k, &k);
    let rotation = mat_add(&mat_add(&IDENTITY3, &mat_scale(&k, a)), &mat_scale(&k2, b));
    let v = mat_add(&mat_add(&IDENTITY3, &mat_scale(&k, b)), &mat_scale(&k2, c));
    RigidTransform::new(rotation, mat_vec(&v, w.translation()))
}

/// Rotation angle of `r` in radians, computed robustly over `[0, pi]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let axis = linalg::vee(r);
    let s = linalg::norm(axis);
    let c = 0.5 * (linalg::trace(r) - 1.0);
    libm::atan2(s, c)
}

/// Logarithm of a rigid transform; fails within `1e-6` of a half turn.
pub fn log_se3(t: &RigidTransform) -> Result<Twist> {
    let r = &t.rotation;
    let theta = rotation_angle(r);
    if theta >= PI - 1e-6 {
        return Err(Error::AngleNearPi { angle: theta });
    }
    let axis = linalg::vee(r);
    let omega = if theta < SMALL_ANGLE {
        linalg::scale(axis, 1.0 + theta * theta / 6.0)
    } else {
        linalg::scale(axis, theta / libm::sin(theta))
    };
    let k = hat(omega);
    let k2 = mat_mul(&k, &k);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (a, b, _) = so3_coefficients(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = mat_add(&mat_add(&IDENTITY3, &mat_scale(&k, -0.5)), &mat_scale(&k2, d));
    Ok(Twist::new(omega, mat_vec(&v_inv, t.translation)))
}

/// `a * b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        mat_mul(&a.rotation, &b.rotation),
        linalg::add(mat_vec(&a.rotation, b.translation), a.translation),
    )
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = transpose(&t.rotation);
    let ti = mat_vec(&rt, t.translation);
    RigidTransform::new(rt, [-ti[0], -ti[1], -ti[2]])
}

/// Maps every point through `t`; normals are rotated.
pub fn apply(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let points = t.apply_points(cloud.points());
    let normals = cloud
        .normals()
        .map(|ns| ns.iter().map(|n| t.apply_vector(*n)).collect::<Vec<_>>());
    PointCloud::from_parts_unchecked(points, normals)
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = (libm::sin(a), libm::cos(a));
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation from intrinsic Z-Y-X Euler angles `[yaw, pitch, roll]` in degrees.
pub fn rotation_from_euler_zyx_deg(angles: [f64; 3]) -> Mat3 {
    let [z, y, x] = angles.map(f64::to_radians);
    mat_mul(&mat_mul(&rot_z(z), &rot_y(y)), &rot_x(x))
}

/// Intrinsic Z-Y-X Euler angles `[yaw, pitch, roll]` in degrees.
pub fn euler_zyx_deg(r: &Mat3) -> [f64; 3] {
    let pitch = libm::asin((-r[2][0]).clamp(-1.0, 1.0));
    let (yaw, roll) = if linalg::abs(r[2][0]) < 1.0 - 1e-12 {
        (libm::atan2(r[1][0], r[0][0]), libm::atan2(r[2][1], r[2][2]))
    } else {
        // gimbal lock: fold everything into yaw
        (libm::atan2(-r[0][1], r[1][1]), 0.0)
    };
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

/// Samples a transform with Euler angles i.i.d. uniform on `[0, rot_max_deg]`
/// and translation components i.i.d. uniform on `[-trans_max, trans_max]`.
pub fn sample_transform(seed: u64, rot_max_deg: f64, trans_max: f64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_transform_with(&mut rng, rot_max_deg, trans_max)
}

pub fn sample_transform_with<R: Rng + ?Sized>(rng: &mut R, rot_max_deg: f64, trans_max: f64) -> RigidTransform {
    let mut angles = [0.0; 3];
    for a in angles.iter_mut() {
        *a = rng.gen::<f64>() * rot_max_deg;
    }
    let mut t = [0.0; 3];
    for v in t.iter_mut() {
        *v = (2.0 * rng.gen::<f64>() - 1.0) * trans_max;
    }
    RigidTransform::new(rotation_from_euler_zyx_deg(angles), t)
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(ra: &Mat3, rb: &Mat3) -> f64 {
    let m = mat_mul(&transpose(ra), rb);
    let c = ((linalg::trace(&m) - 1.0) * 0.5).clamp(-1.0, 1.0);
    libm::acos(c).to_degrees()
}

/// Wraps an angle difference in degrees into `(-180, 180]`.
pub fn wrap_deg(d: f64) -> f64 {
    let mut d = libm::fmod(d, 360.0);
    if d > 180.0 {
        d -= 360.0;
    } else if d <= -180.0 {
        d += 360.0;
    }
    d
}

/// RMSE and MAE of Euler-angle residuals, pooled over all components.
pub fn euler_rmse_mae(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for k in 0..3 {
            let d = wrap_deg(p[k] - g[k]);
            sq += d * d;
            ab += linalg::abs(d);
        }
    }
    let n = (3 * pred.len()) as f64;
    Ok((linalg::sqrt(sq / n), ab / n))
}
