//! Training objectives.
//!
//! The total loss is `primary + lambda1 * chamfer + lambda2 * normal`, where
//! the primary term is the global alignment distance plus the symmetric KL
//! divergence between the feature changes of two local regions.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{self, NeighborIndex, PointCloud};
use crate::diffnet::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{self, RigidTransform};
use crate::linalg;
use crate::model::Model;

/// Additive floor inside the logarithms of the KL divergence.
pub const KL_EPS: f64 = 1e-12;

/// How the outlier clamp `c` of the far-anchor selection is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierPolicy {
    /// `c` = factor x median distance to the barycenter.
    MedianMultiple(f64),
    Fixed(f64),
}

impl Default for OutlierPolicy {
    fn default() -> Self {
        OutlierPolicy::MedianMultiple(3.0)
    }
}

impl OutlierPolicy {
    pub fn threshold(&self, cloud: &PointCloud) -> f64 {
        match *self {
            OutlierPolicy::Fixed(c) => c,
            OutlierPolicy::MedianMultiple(f) => f * median_barycenter_distance(cloud),
        }
    }

    fn threshold_param(&self) -> f64 {
        match *self {
            OutlierPolicy::Fixed(v) | OutlierPolicy::MedianMultiple(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Points per local region (N_l).
    pub local_size: usize,
    pub outlier: OutlierPolicy,
    /// Include the descriptor alignment term `||psi(W X) - psi(Y)||` in the
    /// primary loss.
    pub global_alignment: bool,
    /// Include the local-consistency KL term in the primary loss.
    pub local_consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.5,
            lambda2: 0.1,
            local_size: 64,
            outlier: OutlierPolicy::default(),
            global_alignment: true,
            local_consistency: true,
        }
    }
}

impl LossConfig {
    /// Self-reconstruction only: no primary terms and no normal task.
    pub fn reconstruction_only() -> Self {
        LossConfig { lambda2: 0.0, global_alignment: false, local_consistency: false, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if self.local_size == 0 {
            return Err(Error::invalid("local_size must be at least 1"));
        }
        if !(self.outlier.threshold_param() > 0.0) {
            return Err(Error::invalid("outlier threshold must be positive"));
        }
        Ok(())
    }
}

/// Weighted loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub primary: f64,
    pub chamfer: f64,
    pub normal: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// `|total - (primary + lambda1 chamfer + lambda2 normal)|`.
    pub fn consistency_error(&self) -> f64 {
        linalg::abs(self.total - (self.primary + self.lambda1 * self.chamfer + self.lambda2 * self.normal))
    }

    /// Componentwise mean of several breakdowns (same weights assumed).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.primary += b.primary;
            out.chamfer += b.chamfer;
            out.normal += b.normal;
        }
        out.primary /= n;
        out.chamfer /= n;
        out.normal /= n;
        if let Some(first) = items.first() {
            out.lambda1 = first.lambda1;
            out.lambda2 = first.lambda2;
        }
        total_loss(out.primary, out.chamfer, out.normal, out.lambda1, out.lambda2)
    }
}

/// `L = L_p + lambda1 L_CD + lambda2 L_n`.
pub fn total_loss(primary: f64, chamfer: f64, normal: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown { total: primary + lambda1 * chamfer + lambda2 * normal, primary, chamfer, normal, lambda1, lambda2 }
}

/// Index sets of the two local regions and their anchors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalRegionPair {
    /// Point farthest from the barycenter after clamping distances at `c`.
    pub far_anchor: usize,
    /// Point closest to the barycenter.
    pub close_anchor: usize,
    pub region1: Vec<usize>,
    pub region2: Vec<usize>,
}

pub fn median_barycenter_distance(cloud: &PointCloud) -> f64 {
    let b = cloud::barycenter(cloud);
    let mut d: Vec<f64> = cloud.points().iter().map(|p| linalg::dist(*p, b)).collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// Picks the far anchor `argmax min(|x - x_b|, c)` and the close anchor
/// `argmin |x - x_b|` (lowest index on ties) and grows each into its
/// `local_size` nearest neighbors, the anchor included.
pub fn select_local_regions(cloud: &PointCloud, local_size: usize, c: f64) -> Result<LocalRegionPair> {
    if cloud.len() < 2 {
        return Err(Error::TooFewPoints { needed: 1, got: cloud.len() });
    }
    if local_size == 0 || !(c > 0.0) {
        return Err(Error::invalid("local_size must be >= 1 and c > 0"));
    }
    let pts = cloud.points();
    if pts.iter().all(|p| *p == pts[0]) {
        return Err(Error::DegenerateCloud("all points coincide"));
    }
    let b = cloud::barycenter(cloud);
    let mut far = (0usize, f64::NEG_INFINITY);
    let mut close = (0usize, f64::INFINITY);
    for (i, p) in pts.iter().enumerate() {
        let d = linalg::dist(*p, b);
        let clamped = d.min(c);
        if clamped > far.1 {
            far = (i, clamped);
        }
        if d < close.1 {
            close = (i, d);
        }
    }
    let index = NeighborIndex::new(pts);
    let grow = |anchor: usize| index.knn(pts[anchor], local_size).into_iter().map(|(i, _)| i).collect();
    Ok(LocalRegionPair { far_anchor: far.0, close_anchor: close.0, region1: grow(far.0), region2: grow(close.0) })
}

/// `|d_x - d_y|_2` (not squared).
pub fn global_alignment_loss(tape: &mut Tape<'_>, dx: Var, dy: Var) -> Result<Var> {
    let diff = tape.sub(dx, dy)?;
    tape.l2_norm(diff)
}

/// Symmetric KL divergence between `softmax(tau1)` and `softmax(tau2)`:
/// `(KL(p||q) + KL(q||p)) / 2 = sum((p - q)(log(p + eps) - log(q + eps))) / 2`.
pub fn local_consistency_loss(tape: &mut Tape<'_>, tau1: Var, tau2: Var) -> Result<Var> {
    let (a, b) = (tape.value(tau1), tape.value(tau2));
    if a.shape() != b.shape() || a.rank() != 1 {
        return Err(Error::ShapeMismatch {
            op: "local_consistency_loss",
            detail: alloc::format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let p = tape.softmax(tau1)?;
    let q = tape.softmax(tau2)?;
    let pe = tape.add_scalar(p, KL_EPS)?;
    let qe = tape.add_scalar(q, KL_EPS)?;
    let lp = tape.log(pe)?;
    let lq = tape.log(qe)?;
    let dlog = tape.sub(lp, lq)?;
    let dp = tape.sub(p, q)?;
    let prod = tape.mul(dp, dlog)?;
    let s = tape.sum(prod)?;
    tape.scale(s, 0.5)
}

/// Symmetric Chamfer distance between two `n x 3` point matrices.
pub fn chamfer(tape: &mut Tape<'_>, p: Var, reconstructed: Var) -> Result<Var> {
    tape.chamfer(p, reconstructed)
}

/// `1 - mean_i cos(predicted_i, truth_i)` for one cloud.
pub fn normal_term(tape: &mut Tape<'_>, predicted: Var, truth: Var) -> Result<Var> {
    let pred = tape.value(predicted);
    if pred.data().chunks(pred.cols().max(1)).any(|r| linalg::sqrt(r.iter().map(|v| v * v).sum()) < 1e-12) {
        return Err(Error::DegenerateNormal);
    }
    let cos = tape.row_cosine(predicted, truth)?;
    let m = tape.mean(cos)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Points and descriptor of one cloud as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedCloud {
    pub points: Var,
    pub descriptor: Var,
}

pub fn encode_cloud(tape: &mut Tape<'_>, model: &Model, cloud: &PointCloud) -> Result<EncodedCloud> {
    let points = tape.constant(Tensor::from_rows(cloud.points()));
    let descriptor = model.encode_var(tape, points)?;
    Ok(EncodedCloud { points, descriptor })
}

/// Chamfer distance between a cloud and its decoded reconstruction.
pub fn reconstruction_term(tape: &mut Tape<'_>, model: &Model, enc: EncodedCloud) -> Result<Var> {
    let rec = model.decode_var(tape, enc.descriptor)?;
    chamfer(tape, enc.points, rec)
}

/// `chamfer(X, decode(encode(X))) + chamfer(Y, decode(encode(Y)))`.
pub fn reconstruction_loss(tape: &mut Tape<'_>, model: &Model, x: &PointCloud, y: &PointCloud) -> Result<Var> {
    let ex = encode_cloud(tape, model, x)?;
    let ey = encode_cloud(tape, model, y)?;
    let a = reconstruction_term(tape, model, ex)?;
    let b = reconstruction_term(tape, model, ey)?;
    tape.add(a, b)
}

fn normal_term_for(tape: &mut Tape<'_>, model: &Model, cloud: &PointCloud, enc: EncodedCloud) -> Result<Var> {
    let truth = cloud.normals().ok_or(Error::MissingNormals)?;
    let pred = model.normals_var(tape, enc.points, enc.descriptor)?;
    let t = tape.constant(Tensor::from_rows(truth));
    normal_term(tape, pred, t)
}

/// Cosine normal loss summed over both clouds; each contributes `[0, 2]`.
pub fn normal_loss(tape: &mut Tape<'_>, model: &Model, x: &PointCloud, y: &PointCloud) -> Result<Var> {
    if x.normals().is_none() || y.normals().is_none() {
        return Err(Error::MissingNormals);
    }
    let ex = encode_cloud(tape, model, x)?;
    let ey = encode_cloud(tape, model, y)?;
    let a = normal_term_for(tape, model, x, ex)?;
    let b = normal_term_for(tape, model, y, ey)?;
    tape.add(a, b)
}

/// Tape handles of every loss component of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub total: Var,
    pub primary: Var,
    pub chamfer: Var,
    pub normal: Var,
}

impl SampleLoss {
    pub fn breakdown(&self, tape: &Tape<'_>, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            primary: tape.scalar(self.primary),
            chamfer: tape.scalar(self.chamfer),
            normal: tape.scalar(self.normal),
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        }
    }
}

/// Feature change of one region under `transform`.
fn region_feature_change(
    tape: &mut Tape<'_>,
    model: &Model,
    region: &PointCloud,
    transform: &RigidTransform,
) -> Result<Var> {
    let moved = geom3d::apply(transform, region);
    let a = encode_cloud(tape, model, region)?;
    let b = encode_cloud(tape, model, &moved)?;
    model.feature_change_var(tape, a.descriptor, b.descriptor)
}

/// Full objective for a source `x`, target `y` and the transform `w` used to
/// align descriptors (the ground-truth training transform).
pub fn sample_loss(
    tape: &mut Tape<'_>,
    model: &Model,
    x: &PointCloud,
    y: &PointCloud,
    w: &RigidTransform,
    cfg: &LossConfig,
) -> Result<SampleLoss> {
    let ex = encode_cloud(tape, model, x)?;
    let ey = encode_cloud(tape, model, y)?;
    let mut primary = if cfg.global_alignment {
        let ewx = encode_cloud(tape, model, &geom3d::apply(w, x))?;
        global_alignment_loss(tape, ewx.descriptor, ey.descriptor)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    if cfg.local_consistency {
        let c = cfg.outlier.threshold(x);
        let regions = select_local_regions(x, cfg.local_size, c)?;
        let tau1 = region_feature_change(tape, model, &x.select(&regions.region1), w)?;
        let tau2 = region_feature_change(tape, model, &x.select(&regions.region2), w)?;
        let kl = local_consistency_loss(tape, tau1, tau2)?;
        primary = tape.add(primary, kl)?;
    }
    let cx = reconstruction_term(tape, model, ex)?;
    let cy = reconstruction_term(tape, model, ey)?;
    let chamfer = tape.add(cx, cy)?;
    let normal = if cfg.lambda2 > 0.0 {
        let nx = normal_term_for(tape, model, x, ex)?;
        let ny = normal_term_for(tape, model, y, ey)?;
        tape.add(nx, ny)?
    } else {
        // unweighted anyway; skipped to save the head's forward pass
        tape.constant(Tensor::scalar(0.0))
    };

    let wc = tape.scale(chamfer, cfg.lambda1)?;
    let wn = tape.scale(normal, cfg.lambda2)?;
    let aux = tape.add(wc, wn)?;
    let total = tape.add(primary, aux)?;
    Ok(SampleLoss { total, primary, chamfer, normal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn line() -> PointCloud {
        PointCloud::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn anchors_on_a_line() {
        let r = select_local_regions(&line(), 1, 10.0).unwrap();
        assert_eq!((r.far_anchor, r.close_anchor), (2, 1));
        assert_eq!((r.region1.clone(), r.region2.clone()), (vec![2], vec![1]));
        let r = select_local_regions(&line(), 1, 1.0).unwrap();
        assert_eq!(r.far_anchor, 0);
        let r = select_local_regions(&line(), 10, 10.0).unwrap();
        assert_eq!(r.region1.len(), 3);
        assert_eq!(r.region2.len(), 3);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let c = PointCloud::from_points(vec![[1.0; 3]; 5]).unwrap();
        assert!(matches!(select_local_regions(&c, 2, 1.0), Err(Error::DegenerateCloud(_))));
    }

    #[test]
    fn global_alignment_pythagorean() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![3.0, 4.0, 0.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![0.0; 4]));
        let l = global_alignment_loss(&mut t, a, b).unwrap();
        assert_eq!(t.scalar(l), 5.0);
        let z = global_alignment_loss(&mut t, a, a).unwrap();
        assert_eq!(t.scalar(z), 0.0);
    }

    #[test]
    fn kl_of_constructed_distributions() {
        // logits (0, 0) -> (0.5, 0.5); logits (ln 9, 0) -> (0.9, 0.1)
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![libm::log(9.0), 0.0]));
        let l = local_consistency_loss(&mut t, a, b).unwrap();
        let expected = 0.5 * (0.5 * libm::log(0.5 / 0.9) + 0.5 * libm::log(0.5 / 0.1)
            + 0.9 * libm::log(0.9 / 0.5) + 0.1 * libm::log(0.1 / 0.5));
        assert!((t.scalar(l) - expected).abs() < 1e-9);
        assert!((t.scalar(l) - 0.4395).abs() < 1e-3);
        let same = local_consistency_loss(&mut t, b, b).unwrap();
        assert!(t.scalar(same).abs() < 1e-12);
    }

    #[test]
    fn chamfer_of_two_singletons() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[0.0; 3]]));
        let b = t.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
        let c = chamfer(&mut t, a, b).unwrap();
        assert_eq!(t.scalar(c), 2.0);
    }

    #[test]
    fn normal_term_extremes() {
        let truth = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let cases = [
            ([[0.0, 0.0, 2.0], [3.0, 0.0, 0.0]], 0.0),
            ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 1.0),
            ([[0.0, 0.0, -1.0], [-0.5, 0.0, 0.0]], 2.0),
        ];
        for (pred, expected) in cases {
            let mut t = Tape::new();
            let p = t.constant(Tensor::from_rows(&pred));
            let g = t.constant(Tensor::from_rows(&truth));
            let l = normal_term(&mut t, p, g).unwrap();
            assert!((t.scalar(l) - expected).abs() < 1e-15);
        }
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_rows(&[[0.0; 3]]));
        let g = t.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
        assert_eq!(normal_term(&mut t, p, g).unwrap_err(), Error::DegenerateNormal);
    }

    #[test]
    fn total_is_linear_combination() {
        let b = total_loss(1.0, 0.2, 0.3, 0.5, 0.1);
        assert!((b.total - 1.13).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.2, 0.3, 0.0, 0.0).total, 1.0);
        let d = LossConfig::default();
        assert_eq!((d.lambda1, d.lambda2, d.local_size), (0.5, 0.1, 64));
    }
}
