//! Registration error records, recall and the RMSE/MAE table.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{self, RigidTransform};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub ground_truth: RigidTransform,
    pub estimate: RigidTransform,
    /// Geodesic rotation error in degrees.
    pub rot_err_deg: f64,
    /// Euclidean norm of the translation difference.
    pub trans_err: f64,
    pub runtime_ms: f64,
    pub iterations: usize,
}

impl EvalRecord {
    pub fn new(ground_truth: RigidTransform, estimate: RigidTransform, runtime_ms: f64, iterations: usize) -> Self {
        let rot_err_deg = geom3d::rotation_error_deg(&ground_truth.rotation, &estimate.rotation);
        let trans_err = linalg::dist(ground_truth.translation, estimate.translation);
        EvalRecord { ground_truth, estimate, rot_err_deg, trans_err, runtime_ms, iterations }
    }

    /// Record with errors given directly (no transforms involved).
    pub fn from_errors(rot_err_deg: f64, trans_err: f64) -> Self {
        EvalRecord {
            ground_truth: RigidTransform::IDENTITY,
            estimate: RigidTransform::IDENTITY,
            rot_err_deg,
            trans_err,
            runtime_ms: 0.0,
            iterations: 0,
        }
    }

    pub fn is_success(&self, rot_thresh_deg: f64, trans_thresh: f64) -> bool {
        self.rot_err_deg < rot_thresh_deg && self.trans_err < trans_thresh
    }
}

/// Fraction of records with both errors strictly below the thresholds.
pub fn recall(records: &[EvalRecord], rot_thresh_deg: f64, trans_thresh: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let hits = records.iter().filter(|r| r.is_success(rot_thresh_deg, trans_thresh)).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rmse_r: f64,
    pub mae_r: f64,
    pub rmse_t: f64,
    pub mae_t: f64,
}

impl MetricsTable {
    pub const CSV_HEADER: &'static str = "rmse_r_deg,mae_r_deg,rmse_t,mae_t";

    /// Rotation columns with 3 decimals, translation with 3 significant digits.
    pub fn csv_row(&self) -> alloc::string::String {
        alloc::format!(
            "{:.3},{:.3},{},{}",
            self.rmse_r,
            self.mae_r,
            format_sig3(self.rmse_t),
            format_sig3(self.mae_t)
        )
    }
}

/// `v` in exponent notation with three significant digits.
pub fn format_sig3(v: f64) -> alloc::string::String {
    alloc::format!("{:.2e}", v)
}

/// Euler-angle (degrees) and componentwise translation RMSE/MAE.
pub fn metrics_table(records: &[EvalRecord]) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let pred: Vec<[f64; 3]> = records.iter().map(|r| geom3d::euler_zyx_deg(&r.estimate.rotation)).collect();
    let gt: Vec<[f64; 3]> = records.iter().map(|r| geom3d::euler_zyx_deg(&r.ground_truth.rotation)).collect();
    let (rmse_r, mae_r) = geom3d::euler_rmse_mae(&pred, &gt)?;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for r in records {
        for k in 0..3 {
            let d = r.estimate.translation[k] - r.ground_truth.translation[k];
            sq += d * d;
            ab += linalg::abs(d);
        }
    }
    let n = (3 * records.len()) as f64;
    Ok(MetricsTable { rmse_r, mae_r, rmse_t: linalg::sqrt(sq / n), mae_t: ab / n })
}

/// Chamfer distance between `points` and its copy rotated by each angle
/// (radians) about `axis` through the origin.
pub fn rotation_awareness(points: &[linalg::Vec3], axis: linalg::Vec3, angles_rad: &[f64]) -> Result<Vec<(f64, f64)>> {
    if points.is_empty() {
        return Err(Error::DegenerateCloud("empty point cloud"));
    }
    if !(linalg::norm(axis) > 0.0) {
        return Err(Error::ZeroVector("rotation axis"));
    }
    Ok(angles_rad
        .iter()
        .map(|&a| {
            let rotated = RigidTransform::from_axis_angle(axis, a).apply_points(points);
            (a, crate::cloud::chamfer_distance(points, &rotated))
        })
        .collect())
}
