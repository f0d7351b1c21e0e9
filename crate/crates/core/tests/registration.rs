mod support;

use std::cell::Cell;

use dvd_core::solver::{self, DescriptorFn, Jacobian};
use dvd_core::{geom3d, linalg, Model, ModelConfig, PointCloud, RigidTransform, Result, SolverConfig, Twist, Vec3};
use rand::Rng;
use support::*;

/// Smooth hand-written descriptor: low-order moments about the origin.
struct Moments;

impl DescriptorFn for Moments {
    fn descriptor(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let n = points.len() as f64;
        let mut d = vec![0.0; 12];
        for p in points {
            for k in 0..3 {
                d[k] += p[k] / n;
                d[3 + k] += p[k] * p[k] / n;
                d[9 + k] += p[k].powi(3) / n;
            }
            d[6] += p[0] * p[1] / n;
            d[7] += p[1] * p[2] / n;
            d[8] += p[0] * p[2] / n;
        }
        Ok(d)
    }
}

struct Counting<E> {
    inner: E,
    calls: Cell<usize>,
}

impl<E: DescriptorFn> DescriptorFn for Counting<E> {
    fn descriptor(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.descriptor(points)
    }
}

fn cloud(seed: u64, n: usize) -> PointCloud {
    PointCloud::from_points(random_points(&mut rng(seed), n, 1.0)).unwrap()
}

#[test]
fn increment_matches_pseudoinverse() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let rows = r.gen_range(6..40);
        let j: Vec<f64> = (0..rows * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let res: Vec<f64> = (0..rows).map(|_| r.gen_range(-1.0..1.0)).collect();
        let jac = Jacobian::new(rows, j.clone()).unwrap();
        let got = solver::iclk_increment(&jac, &res, 0.0).unwrap();
        let want = pinv_solve(&j, rows, &res);
        for k in 0..6 {
            assert!((got.0[k] - want[k]).abs() < 1e-8, "seed {seed}");
        }
    }
}

#[test]
fn zero_residual_gives_zero_step() {
    let jac = Jacobian::new(8, (0..48).map(|i| (i as f64).sin()).collect()).unwrap();
    assert_eq!(solver::iclk_increment(&jac, &[0.0; 8], 1e-9).unwrap(), Twist([0.0; 6]));
}

#[test]
fn jacobian_is_first_order_in_the_step() {
    let y = cloud(1, 64);
    let j = |h: f64| solver::compute_jacobian(&Moments, &y, h).unwrap().data;
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let (j1, j2, j4) = (j(1e-2), j(5e-3), j(2.5e-3));
    let coarse = gap(&j1, &j2);
    let fine = gap(&j2, &j4);
    assert!(coarse > 0.0);
    let ratio = coarse / fine;
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn jacobian_is_computed_once_per_registration() {
    let model = Model::new(ModelConfig { descriptor_dim: 32, encoder_widths: vec![32, 32], ..ModelConfig::default() }, 3).unwrap();
    for seed in 0..10 {
        let x = cloud(seed, 64);
        let y = geom3d::apply(&geom3d::sample_transform(seed, 20.0, 0.1), &x);
        for max_iterations in [1, 3, 10] {
            let enc = Counting { inner: &model, calls: Cell::new(0) };
            let cfg = SolverConfig { max_iterations, ..SolverConfig::default() };
            let res = solver::register_iclk(&enc, &x, &y, &cfg).unwrap();
            // six perturbed targets plus psi(Y), then psi(X) and one per iteration
            assert_eq!(enc.calls.get(), 7 + 1 + res.iterations_used);
            assert_eq!(res.residual_history.len(), res.iterations_used + 1);
            assert!(res.transform.orthonormality_error() < 1e-9);
        }
    }
}

#[test]
fn aligned_pair_converges_immediately() {
    let model = Model::new(ModelConfig::default(), 4).unwrap();
    let x = cloud(5, 128);
    let res = solver::register_iclk(&model, &x, &x, &SolverConfig::default()).unwrap();
    assert!(res.converged);
    assert_eq!(res.iterations_used, 1);
    assert_eq!(res.residual_history[0], 0.0);
    assert!(res.transform.max_abs_diff(&RigidTransform::IDENTITY) < 1e-6);
}

#[test]
fn moments_encoder_recovers_small_motion() {
    let x = cloud(6, 200);
    let t = geom3d::exp_se3(&Twist::new([0.0, 0.0, 0.02], [0.01, -0.01, 0.0]));
    let y = geom3d::apply(&t, &x);
    let res = solver::register_iclk(&Moments, &x, &y, &SolverConfig { max_iterations: 50, ..SolverConfig::default() }).unwrap();
    assert!(geom3d::rotation_error_deg(&res.transform.rotation, &t.rotation) < 0.05);
    assert!(linalg::dist(res.transform.translation, t.translation) < 1e-3);
}

#[test]
fn icp_recovers_small_motions() {
    let mut hits = 0;
    for seed in 0..100 {
        let x = cloud(1000 + seed, 256);
        let mut r = rng(seed);
        let axis = random_points(&mut r, 1, 1.0)[0];
        let angle = r.gen_range(0.0..10f64.to_radians());
        let shift = random_points(&mut r, 1, 0.1)[0];
        let t = geom3d::compose(&RigidTransform::from_translation(shift), &RigidTransform::from_axis_angle(axis, angle));
        let res = solver::register_icp(&x, &geom3d::apply(&t, &x), 100, 1e-14).unwrap();
        let rot = geom3d::rotation_error_deg(&res.transform.rotation, &t.rotation);
        let tr = linalg::dist(res.transform.translation, t.translation);
        if rot < 0.1 && tr < 1e-3 {
            hits += 1;
        }
    }
    assert!(hits >= 99, "{hits}/100");
}

#[test]
fn icp_on_a_copy_is_identity() {
    let x = cloud(7, 100);
    let res = solver::register_icp(&x, &x, 5, 1e-12).unwrap();
    assert!(res.transform.max_abs_diff(&RigidTransform::IDENTITY) < 1e-9);
    assert_eq!(res.iterations_used, 1);
}

#[test]
fn rigid_fit_is_proper_on_mirrored_planes() {
    let src: Vec<Vec3> = (0..20).map(|i| [(i % 5) as f64, (i / 5) as f64 * 0.7, 0.0]).collect();
    let dst: Vec<Vec3> = src.iter().map(|p| [-p[0], p[1], 0.0]).collect();
    let fit = solver::fit_rigid(&src, &dst).unwrap();
    assert!((linalg::det(&fit.rotation) - 1.0).abs() < 1e-9);
    assert!(fit.is_valid());
}
