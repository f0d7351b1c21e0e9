//! Point clouds, triangle meshes and the operations the pipeline needs on
//! them: surface sampling, normalization, corruption models, exact
//! nearest-neighbor search and PCA normals.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};

/// Ordered 3-D points with optional unit normals of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    /// Validates the cloud: nonempty, finite, and unit normals when present.
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud("empty point cloud"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinate".into()));
        }
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(Error::LengthMismatch { left: points.len(), right: ns.len() });
            }
            if ns.iter().any(|n| linalg::abs(linalg::norm(*n) - 1.0) > 1e-6) {
                return Err(Error::invalid("normals must have unit length"));
            }
        }
        Ok(PointCloud { points, normals })
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        Self::new(points, None)
    }

    /// Skips validation; callers guarantee the invariants (used on outputs
    /// of rigid maps of valid clouds).
    pub(crate) fn from_parts_unchecked(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Self {
        debug_assert!(!points.is_empty());
        PointCloud { points, normals }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn without_normals(&self) -> PointCloud {
        PointCloud { points: self.points.clone(), normals: None }
    }

    pub fn with_normals(self, normals: Vec<Vec3>) -> Result<Self> {
        Self::new(self.points, Some(normals))
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect());
        PointCloud::from_parts_unchecked(points, normals)
    }
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(bad) = faces.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::invalid(alloc::format!(
                "face index {bad} out of range for {} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        Ok(TriangleMesh { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    fn corners(&self, f: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
        (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]])
    }

    /// Unnormalized face normal; its length is twice the face area.
    fn face_cross(&self, f: &[usize; 3]) -> Vec3 {
        let (a, b, c) = self.corners(f);
        linalg::cross(linalg::sub(b, a), linalg::sub(c, a))
    }

    pub fn surface_area(&self) -> f64 {
        self.faces.iter().map(|f| 0.5 * linalg::norm(self.face_cross(f))).sum()
    }
}

/// Samples `n` points area-uniformly on the mesh surface. Each point carries
/// the unit normal of the face it was drawn from.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += 0.5 * linalg::norm(mesh.face_cross(f));
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        let fi = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
        // zero-area faces share their cumulative value with the previous face and are never hit
        let face = &mesh.faces[fi];
        let (a, b, c) = mesh.corners(face);
        let r1 = linalg::sqrt(rng.gen::<f64>());
        let r2 = rng.gen::<f64>();
        let wa = 1.0 - r1;
        let wb = r1 * (1.0 - r2);
        let wc = r1 * r2;
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        let nrm = mesh.face_cross(face);
        normals.push(linalg::scale(nrm, 1.0 / linalg::norm(nrm)));
    }
    Ok(PointCloud::from_parts_unchecked(points, Some(normals)))
}

pub fn barycenter(cloud: &PointCloud) -> Vec3 {
    centroid(cloud.points())
}

pub(crate) fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for p in points {
        c = linalg::add(c, *p);
    }
    linalg::scale(c, 1.0 / points.len() as f64)
}

/// Centers the cloud at its barycenter and scales it so the farthest point
/// has unit norm. Returns the cloud with the `(center, scale)` needed to undo
/// it: `original = normalized * scale + center`.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Vec3, f64)> {
    let center = barycenter(cloud);
    let scale = cloud
        .points
        .iter()
        .map(|p| linalg::dist(*p, center))
        .fold(0.0f64, f64::max);
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud("all points coincide"));
    }
    Ok((rescale(cloud, center, scale), center, scale))
}

/// `(p - center) / scale` for every point; normals are kept.
pub fn rescale(cloud: &PointCloud, center: Vec3, scale: f64) -> PointCloud {
    let inv = 1.0 / scale;
    let points = cloud.points.iter().map(|p| linalg::scale(linalg::sub(*p, center), inv)).collect();
    PointCloud::from_parts_unchecked(points, cloud.normals.clone())
}

/// Adds i.i.d. isotropic zero-mean Gaussian offsets with standard deviation
/// `sigma` to every point. Normals are left untouched.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("noise sigma must be finite and nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in q.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            q
        })
        .collect();
    Ok(PointCloud::from_parts_unchecked(points, cloud.normals.clone()))
}

/// Uniformly distributed unit view direction derived from `seed`.
pub fn view_direction(seed: u64) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = 2.0 * rng.gen::<f64>() - 1.0;
    let phi = 2.0 * core::f64::consts::PI * rng.gen::<f64>();
    let r = linalg::sqrt((1.0 - z * z).max(0.0));
    [r * libm::cos(phi), r * libm::sin(phi), z]
}

/// Half-space visibility crop: keeps the `ceil(keep_fraction * N)` points
/// with the largest projection on the view direction drawn from `seed`,
/// preserving their original order.
pub fn crop_partial(cloud: &PointCloud, keep_fraction: f64, seed: u64) -> Result<PointCloud> {
    crop_partial_along(cloud, keep_fraction, view_direction(seed))
}

pub fn crop_partial_along(cloud: &PointCloud, keep_fraction: f64, direction: Vec3) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid("keep_fraction must lie in (0, 1]"));
    }
    let n = cloud.len();
    let keep = (libm::ceil(keep_fraction * n as f64) as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // descending projection, lower index first on ties
    order.sort_by(|&i, &j| {
        let di = linalg::dot(cloud.points[i], direction);
        let dj = linalg::dot(cloud.points[j], direction);
        dj.total_cmp(&di).then(i.cmp(&j))
    });
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(cloud.select(&kept))
}

/// Per-point normals from the smallest-eigenvalue eigenvector of the
/// covariance of each point's `k` nearest neighbors (the point included),
/// oriented away from the barycenter.
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let n = cloud.len();
    if k < 3 || n <= k {
        return Err(Error::TooFewPoints { needed: k.max(3), got: n });
    }
    let index = NeighborIndex::new(cloud.points());
    let center = barycenter(cloud);
    let mut normals = Vec::with_capacity(n);
    for p in cloud.points() {
        let nbrs = index.knn(*p, k);
        let local: Vec<Vec3> = nbrs.iter().map(|&(i, _)| cloud.points[i]).collect();
        let mu = centroid(&local);
        let mut cov = [[0.0; 3]; 3];
        for q in &local {
            let d = linalg::sub(*q, mu);
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += d[a] * d[b];
                }
            }
        }
        let (_, vecs) = linalg::sym_eigen(cov);
        let mut nrm = [vecs[0][0], vecs[1][0], vecs[2][0]];
        nrm = linalg::scale(nrm, 1.0 / linalg::norm(nrm));
        if linalg::dot(nrm, linalg::sub(*p, center)) < 0.0 {
            nrm = linalg::scale(nrm, -1.0);
        }
        normals.push(nrm);
    }
    Ok(PointCloud::from_parts_unchecked(cloud.points.clone(), Some(normals)))
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact k-d tree over a fixed point set.
///
/// Results are ordered by `(distance, index)`, so equidistant points come
/// back lowest index first.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl NeighborIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut index = NeighborIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&i, &j| points[i][axis].total_cmp(&points[j][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// Exact `k` nearest neighbors of `query` as `(index, distance)`, sorted
    /// ascending with ties broken by lower index. `k` is clamped to the
    /// number of points.
    pub fn knn(&self, query: Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        best.into_iter().map(|(d2, i)| (i, linalg::sqrt(d2))).collect()
    }

    /// Nearest point as `(index, distance)`.
    pub fn nearest(&self, query: Vec3) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search_one(0, query, &mut best);
        (best.1, linalg::sqrt(best.0))
    }

    fn search(&self, node: usize, q: Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (linalg::dist_sq(q, self.points[i]), i);
                    if best.len() == k {
                        let worst = best[k - 1];
                        if cand.0 > worst.0 || (cand.0 == worst.0 && cand.1 > worst.1) {
                            continue;
                        }
                    }
                    let pos = best.partition_point(|b| b.0 < cand.0 || (b.0 == cand.0 && b.1 < cand.1));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // equal-distance candidates may hide behind the plane, so only prune strictly
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }

    fn search_one(&self, node: usize, q: Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = linalg::dist_sq(q, self.points[i]);
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        *best = (d2, i);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_one(near, q, best);
                if diff * diff <= best.0 {
                    self.search_one(far, q, best);
                }
            }
        }
    }
}

/// Symmetric Chamfer distance with plain (non-squared) Euclidean norms:
/// mean nearest distance from `a` to `b` plus mean nearest distance from `b`
/// to `a`.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let (ab, _) = directed_nearest(a, b);
    let (ba, _) = directed_nearest(b, a);
    ab.iter().sum::<f64>() / a.len() as f64 + ba.iter().sum::<f64>() / b.len() as f64
}

/// For each point of `from`, the distance to and index of its nearest point
/// in `to`.
pub(crate) fn directed_nearest(from: &[Vec3], to: &[Vec3]) -> (Vec<f64>, Vec<usize>) {
    let mut dists = vec![0.0; from.len()];
    let mut idx = vec![0usize; from.len()];
    let index = NeighborIndex::new(to);
    for (i, p) in from.iter().enumerate() {
        let (j, d) = index.nearest(*p);
        dists[i] = d;
        idx[i] = j;
    }
    (dists, idx)
}
