//! Procedural triangle meshes: spheres (ellipsoids), boxes, cylinders, tori
//! and random smooth blobs. They stand in for CAD models so training and
//! evaluation run without external data.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, TriangleMesh};
use crate::linalg::{self, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Torus, ShapeKind::Blob];
}

/// Kinds cycled by [`procedural_library`]; blobs dominate because they have
/// no rotational symmetry.
const LIBRARY_CYCLE: [ShapeKind; 10] = [
    ShapeKind::Blob,
    ShapeKind::Box,
    ShapeKind::Blob,
    ShapeKind::Cylinder,
    ShapeKind::Blob,
    ShapeKind::Torus,
    ShapeKind::Blob,
    ShapeKind::Sphere,
    ShapeKind::Blob,
    ShapeKind::Blob,
];

/// `count` meshes with per-shape parameters drawn from `seed`.
pub fn procedural_library(count: usize, seed: u64) -> Vec<TriangleMesh> {
    (0..count)
        .map(|i| {
            let kind = LIBRARY_CYCLE[i % LIBRARY_CYCLE.len()];
            procedural_mesh(kind, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))
        })
        .collect()
}

/// One mesh of the given kind with randomized proportions.
pub fn procedural_mesh(kind: ShapeKind, seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
    match kind {
        ShapeKind::Sphere => {
            let axes = [u(0.6, 1.0), u(0.6, 1.0), u(0.6, 1.0)];
            radial_mesh(16, 24, |d| [d[0] * axes[0], d[1] * axes[1], d[2] * axes[2]])
        }
        ShapeKind::Box => box_mesh([u(0.3, 1.0), u(0.3, 1.0), u(0.3, 1.0)]),
        ShapeKind::Cylinder => cylinder_mesh(u(0.2, 0.6), u(0.6, 1.6), 32),
        ShapeKind::Torus => torus_mesh(u(0.5, 0.8), u(0.1, 0.3), 32, 12),
        ShapeKind::Blob => blob_mesh(&mut rng),
    }
}

/// Closed surface parameterized over the unit sphere: each unit direction is
/// mapped through `f`.
fn radial_mesh(n_lat: usize, n_lon: usize, f: impl Fn(Vec3) -> Vec3) -> TriangleMesh {
    let mut vertices = Vec::new();
    vertices.push(f([0.0, 0.0, 1.0]));
    for i in 1..n_lat {
        let theta = PI * i as f64 / n_lat as f64;
        for j in 0..n_lon {
            let phi = 2.0 * PI * j as f64 / n_lon as f64;
            let d = [
                libm::sin(theta) * libm::cos(phi),
                libm::sin(theta) * libm::sin(phi),
                libm::cos(theta),
            ];
            vertices.push(f(d));
        }
    }
    vertices.push(f([0.0, 0.0, -1.0]));
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * n_lon + (j % n_lon);
    let mut faces = Vec::new();
    for j in 0..n_lon {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..(n_lat - 1) {
        for j in 0..n_lon {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for j in 0..n_lon {
        faces.push([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)]);
    }
    TriangleMesh::new(vertices, faces).expect("radial mesh indices are in range")
}

fn blob_mesh(rng: &mut ChaCha8Rng) -> TriangleMesh {
    let bumps: Vec<(Vec3, f64, f64)> = (0..4)
        .map(|_| {
            let z = 2.0 * rng.gen::<f64>() - 1.0;
            let phi = 2.0 * PI * rng.gen::<f64>();
            let r = linalg::sqrt(1.0 - z * z);
            let dir = [r * libm::cos(phi), r * libm::sin(phi), z];
            let amp = 0.15 + 0.5 * rng.gen::<f64>();
            let sharp = 2.0 + 4.0 * rng.gen::<f64>();
            (dir, amp, sharp)
        })
        .collect();
    let axes = [
        0.6 + 0.4 * rng.gen::<f64>(),
        0.6 + 0.4 * rng.gen::<f64>(),
        0.6 + 0.4 * rng.gen::<f64>(),
    ];
    radial_mesh(20, 32, |d| {
        let mut r = 1.0;
        for (dir, amp, sharp) in &bumps {
            let c = linalg::dot(d, *dir).max(0.0);
            r += amp * libm::pow(c, *sharp);
        }
        [d[0] * axes[0] * r, d[1] * axes[1] * r, d[2] * axes[2] * r]
    })
}

fn box_mesh(size: Vec3) -> TriangleMesh {
    let h = linalg::scale(size, 0.5);
    let mut vertices = Vec::with_capacity(8);
    for &x in &[-h[0], h[0]] {
        for &y in &[-h[1], h[1]] {
            for &z in &[-h[2], h[2]] {
                vertices.push([x, y, z]);
            }
        }
    }
    // vertex index = 4x + 2y + z over {0,1}^3, faces wound outward
    let faces = alloc::vec![
        [0, 1, 3], [0, 3, 2], // x-
        [4, 6, 7], [4, 7, 5], // x+
        [0, 4, 5], [0, 5, 1], // y-
        [2, 3, 7], [2, 7, 6], // y+
        [0, 2, 6], [0, 6, 4], // z-
        [1, 5, 7], [1, 7, 3], // z+
    ];
    TriangleMesh::new(vertices, faces).expect("box indices are in range")
}

/// Capped cylinder along z, centered at the origin.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> TriangleMesh {
    let mut vertices = Vec::new();
    let hz = 0.5 * height;
    for j in 0..segments {
        let phi = 2.0 * PI * j as f64 / segments as f64;
        let (x, y) = (radius * libm::cos(phi), radius * libm::sin(phi));
        vertices.push([x, y, -hz]);
        vertices.push([x, y, hz]);
    }
    let bottom = vertices.len();
    vertices.push([0.0, 0.0, -hz]);
    let top = vertices.len();
    vertices.push([0.0, 0.0, hz]);
    let mut faces = Vec::new();
    for j in 0..segments {
        let k = (j + 1) % segments;
        let (b0, t0, b1, t1) = (2 * j, 2 * j + 1, 2 * k, 2 * k + 1);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([bottom, b1, b0]);
        faces.push([top, t0, t1]);
    }
    TriangleMesh::new(vertices, faces).expect("cylinder indices are in range")
}

fn torus_mesh(major: f64, minor: f64, n_major: usize, n_minor: usize) -> TriangleMesh {
    let mut vertices = Vec::new();
    for i in 0..n_major {
        let u = 2.0 * PI * i as f64 / n_major as f64;
        for j in 0..n_minor {
            let v = 2.0 * PI * j as f64 / n_minor as f64;
            let r = major + minor * libm::cos(v);
            vertices.push([r * libm::cos(u), r * libm::sin(u), minor * libm::sin(v)]);
        }
    }
    let id = |i: usize, j: usize| (i % n_major) * n_minor + (j % n_minor);
    let mut faces = Vec::new();
    for i in 0..n_major {
        for j in 0..n_minor {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("torus indices are in range")
}

/// Points on the lateral surface of a z-axis cylinder laid out on a regular
/// `around x along` lattice, so rotations about the axis by multiples of
/// `2 pi / around` map the set onto itself.
pub fn cylinder_lattice(radius: f64, height: f64, around: usize, along: usize) -> PointCloud {
    let mut points = Vec::with_capacity(around * along);
    let mut normals = Vec::with_capacity(around * along);
    for i in 0..along {
        let z = if along == 1 { 0.0 } else { height * (i as f64 / (along - 1) as f64 - 0.5) };
        for j in 0..around {
            let phi = 2.0 * PI * j as f64 / around as f64;
            let (c, s) = (libm::cos(phi), libm::sin(phi));
            points.push([radius * c, radius * s, z]);
            normals.push([c, s, 0.0]);
        }
    }
    PointCloud::new(points, Some(normals)).expect("lattice is finite with unit normals")
}
