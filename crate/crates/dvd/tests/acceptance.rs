//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `DVD_ACCEPTANCE=1,3,9 cargo test -p dvd --test acceptance` runs a subset.
//! Criteria 6, 7 and 10 train desk-scale models and take about an hour on
//! one core; their runs are kept under the cargo target tmp directory.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dvd::config::ExperimentConfig;
use dvd::experiments::{self as exp, CHECKPOINT_FILE, LOG_FILE};
use dvd_core::cloud::{self, NeighborIndex};
use dvd_core::diffnet::{Tape, Tensor};
use dvd_core::geom3d::{self, RigidTransform, Twist};
use dvd_core::losses::{self, LossConfig};
use dvd_core::metrics::{self, EvalRecord};
use dvd_core::shapes::ShapeKind;
use dvd_core::solver::{self, Jacobian};
use dvd_core::trainer::Trainer;
use dvd_core::{linalg, ModelConfig, PointCloud, Vec3};
use rand::Rng;
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_unit(r: &mut rand_chacha::ChaCha8Rng) -> Vec3 {
    loop {
        let v = random_points(r, 1, 1.0)[0];
        let n = linalg::norm(v);
        if n > 0.1 && n <= 1.0 {
            return linalg::scale(v, 1.0 / n);
        }
    }
}

fn random_transform(r: &mut rand_chacha::ChaCha8Rng) -> RigidTransform {
    let angle = r.gen_range(0.0..3.0);
    let axis = random_unit(r);
    geom3d::exp_se3(&Twist::new(linalg::scale(axis, angle), random_points(r, 1, 1.0)[0]))
}

fn lie_group() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut roundtrip: f64 = 0.0;
    for _ in 0..1000 {
        let angle = r.gen_range(1e-9..3.0);
        let w = Twist::new(linalg::scale(random_unit(&mut r), angle), random_points(&mut r, 1, 1.0)[0]);
        let back = geom3d::log_se3(&geom3d::exp_se3(&w)).unwrap();
        roundtrip = roundtrip.max((0..6).map(|k| (back.0[k] - w.0[k]).abs()).fold(0.0, f64::max));
    }
    let mut group: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b, c) = (random_transform(&mut r), random_transform(&mut r), random_transform(&mut r));
        let assoc = geom3d::compose(&geom3d::compose(&a, &b), &c).max_abs_diff(&geom3d::compose(&a, &geom3d::compose(&b, &c)));
        let inv = geom3d::compose(&geom3d::invert(&a), &a).max_abs_diff(&RigidTransform::IDENTITY);
        let invol = geom3d::invert(&geom3d::invert(&a)).max_abs_diff(&a);
        group = group.max(assoc).max(inv).max(invol);
    }
    let mut rigid: f64 = 0.0;
    for _ in 0..20 {
        let t = random_transform(&mut r);
        let pts = random_points(&mut r, 100, 1.0);
        let moved = geom3d::apply(&t, &PointCloud::from_points(pts.clone()).unwrap());
        for i in 0..100 {
            for j in i + 1..100 {
                let d = linalg::dist(pts[i], pts[j]) - linalg::dist(moved.points()[i], moved.points()[j]);
                rigid = rigid.max(d.abs());
            }
        }
    }
    let took = start.elapsed();
    outcome(
        roundtrip < 1e-8 && group < 1e-9 && rigid < 1e-6 && took < Duration::from_secs(5),
        format!("roundtrip {roundtrip:.1e}, group {group:.1e}, rigidity {rigid:.1e}, {}", secs(took)),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_prim: (f64, &str) = (0.0, "");
    let prims = primitives();
    for (name, make, op) in &prims {
        for seed in 0..20 {
            let e = input_grad_error(&make(&mut rng(seed)), *op);
            if e > worst_prim.0 {
                worst_prim = (e, name);
            }
        }
    }
    let composite = (0..20).map(composite_grad_error).fold(0.0, f64::max);
    let took = start.elapsed();
    outcome(
        worst_prim.0 < 1e-4 && composite < 1e-4 && took < Duration::from_secs(120),
        format!(
            "{} primitives x 20, worst {:.1e} ({}); composite x 20, worst {composite:.1e}; {}",
            prims.len(),
            worst_prim.0,
            worst_prim.1,
            secs(took)
        ),
    )
}

fn oracles() -> Outcome {
    let mut knn_bad = 0;
    let mut chamfer: f64 = 0.0;
    let mut pinv: f64 = 0.0;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let n = r.gen_range(1..120);
        let mut pts = random_points(&mut r, n, 1.0);
        if seed % 2 == 0 {
            for v in pts.iter_mut().flatten() {
                *v = (*v * 4.0).round() / 4.0;
            }
        }
        let index = NeighborIndex::new(&pts);
        let q = random_points(&mut r, 1, 1.2)[0];
        let k = r.gen_range(1..n + 3);
        if index.knn(q, k) != brute_knn(&pts, q, k) {
            knn_bad += 1;
        }
        let m = r.gen_range(1..80);
        let other = random_points(&mut r, m, 1.0);
        chamfer = chamfer.max((cloud::chamfer_distance(&pts, &other) - brute_chamfer(&pts, &other)).abs());

        let rows = r.gen_range(6..40);
        let j: Vec<f64> = (0..rows * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let res: Vec<f64> = (0..rows).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = solver::iclk_increment(&Jacobian::new(rows, j.clone()).unwrap(), &res, 0.0).unwrap();
        let want = pinv_solve(&j, rows, &res);
        pinv = pinv.max((0..6).map(|i| (got.0[i] - want[i]).abs()).fold(0.0, f64::max));
    }
    outcome(
        knn_bad == 0 && chamfer < 1e-9 && pinv < 1e-8,
        format!("knn mismatches {knn_bad}/200, chamfer {chamfer:.1e}, pinv {pinv:.1e}"),
    )
}

fn icp() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    for seed in 0..100 {
        let mut r = rng(5000 + seed);
        let x = PointCloud::from_points(random_points(&mut r, 256, 1.0)).unwrap();
        let rot = RigidTransform::from_axis_angle(random_unit(&mut r), r.gen_range(0.0..10f64.to_radians()));
        let t = geom3d::compose(&RigidTransform::from_translation(random_points(&mut r, 1, 0.1)[0]), &rot);
        let res = solver::register_icp(&x, &geom3d::apply(&t, &x), 100, 1e-14).unwrap();
        let rot_err = geom3d::rotation_error_deg(&res.transform.rotation, &t.rotation);
        if rot_err < 0.1 && linalg::dist(res.transform.translation, t.translation) < 1e-3 {
            hits += 1;
        }
    }
    let took = start.elapsed();
    outcome(hits >= 99 && took < Duration::from_secs(30), format!("{hits}/100 recovered, {}", secs(took)))
}

fn loss_identities() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut t = Tape::new();
    for seed in 0..50 {
        let mut r = rng(seed);
        let (a, b) = (random_points(&mut r, 20, 1.0), random_points(&mut r, 17, 1.0));
        let (va, vb) = (t.constant(Tensor::from_rows(&a)), t.constant(Tensor::from_rows(&b)));
        let (aa, ab, ba) = (
            losses::chamfer(&mut t, va, va).unwrap(),
            losses::chamfer(&mut t, va, vb).unwrap(),
            losses::chamfer(&mut t, vb, va).unwrap(),
        );
        ok &= t.scalar(aa) == 0.0 && t.scalar(ab) == t.scalar(ba);

        let (p, q) = (random_tensor(&mut r, &[9], -3.0, 3.0), random_tensor(&mut r, &[9], -3.0, 3.0));
        let (vp, vq) = (t.constant(p), t.constant(q));
        let kl = losses::local_consistency_loss(&mut t, vp, vq).unwrap();
        let same = losses::local_consistency_loss(&mut t, vp, vp).unwrap();
        ok &= t.scalar(kl) >= 0.0 && t.scalar(same).abs() < 1e-12;
    }
    notes.push(format!("chamfer/KL identities {}", if ok { "hold" } else { "broken" }));

    let truth: Vec<Vec3> = (0..10).map(|i| linalg::scale([1.0, i as f64, 2.0], 1.0 / linalg::norm([1.0, i as f64, 2.0]))).collect();
    let ortho: Vec<Vec3> = truth.iter().map(|n| linalg::cross(*n, [0.0, 0.0, 1.0])).collect();
    let anti: Vec<Vec3> = truth.iter().map(|n| linalg::scale(*n, -3.0)).collect();
    let mut normal = Vec::new();
    for pred in [&truth, &ortho, &anti] {
        let g = t.constant(Tensor::from_rows(&truth));
        let p = t.constant(Tensor::from_rows(pred));
        let one = losses::normal_term(&mut t, p, g).unwrap();
        let both = t.add(one, one).unwrap();
        normal.push(t.scalar(both));
    }
    let normal_ok = normal.iter().zip([0.0, 2.0, 4.0]).all(|(v, w)| (v - w).abs() < 1e-12);
    notes.push(format!("normal {:.3}/{:.3}/{:.3}", normal[0], normal[1], normal[2]));

    let d = LossConfig::default();
    let b = losses::total_loss(1.0, 0.2, 0.3, d.lambda1, d.lambda2);
    let total_ok = (b.total - 1.13).abs() < 1e-12 && d.lambda1 == 0.5 && d.lambda2 == 0.1;
    notes.push(format!("total {:.12}", b.total));
    outcome(ok && normal_ok && total_ok, notes.join(", "))
}

/// Criterion 6 protocol for one seed and loss.
fn protocol_config(seed: u64, loss: LossConfig) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    cfg.dataset.train_shapes = 200;
    cfg.dataset.eval_shapes = 100;
    cfg.dataset.shape_seed = 1 + seed;
    cfg.train.epochs = 100;
    cfg.train.points_per_cloud = 256;
    cfg.train.rot_max_deg = 45.0;
    cfg.train.trans_max = 0.5;
    cfg.train.register_every = 10;
    cfg.train.model = ModelConfig { descriptor_dim: 128, ..ModelConfig::default() };
    cfg.train.loss = LossConfig { local_size: 64, ..loss };
    cfg.thresholds.rot_deg = 5.0;
    cfg.thresholds.trans = 0.05;
    cfg.checkpoint_every = 0;
    cfg
}

struct RunResult {
    dir: PathBuf,
    trained: f64,
    initial: f64,
    took: Duration,
    rot5_err_deg: f64,
    monotone: usize,
}

fn run_protocol(root: &Path, name: &str, cfg: &ExperimentConfig) -> RunResult {
    let dir = root.join(name);
    let _ = fs::remove_dir_all(&dir);
    let initial_model = Trainer::new(cfg.train_config()).unwrap().model;
    let start = Instant::now();
    let trained = exp::run_training(cfg, &dir, None, |r| {
        if r.epoch % 10 == 0 {
            eprintln!("  [{name}] {}", exp::log_row(r));
        }
    })
    .unwrap();
    let took = start.elapsed();
    let pairs = exp::eval_pairs(cfg).unwrap();
    let recall = |records: &[EvalRecord]| metrics::recall(records, cfg.thresholds.rot_deg, cfg.thresholds.trans).unwrap();
    let trained_records = exp::evaluate(&trained.model, &pairs, &cfg.solver).unwrap();
    let initial_records = exp::evaluate(&initial_model, &pairs, &cfg.solver).unwrap();

    // solver diagnostics with the trained encoder
    let small = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 5f64.to_radians());
    let x = &pairs[0].source;
    let fit = solver::register_iclk(&trained.model, x, &geom3d::apply(&small, x), &cfg.solver).unwrap();
    let rot5_err_deg = geom3d::rotation_error_deg(&fit.transform.rotation, &small.rotation);
    let monotone = pairs
        .iter()
        .filter(|p| {
            let r = solver::register_iclk(&trained.model, &p.source, &p.target, &cfg.solver).unwrap();
            r.residual_history.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    RunResult { dir, trained: recall(&trained_records), initial: recall(&initial_records), took, rot5_err_deg, monotone }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Runs {
    root: PathBuf,
    full: Vec<RunResult>,
}

impl Runs {
    fn full(&mut self) -> &[RunResult] {
        if self.full.is_empty() {
            for seed in 0..3 {
                let r = run_protocol(&self.root, &format!("full_seed{seed}"), &protocol_config(seed, LossConfig::default()));
                self.full.push(r);
            }
        }
        &self.full
    }
}

fn training_efficacy(runs: &mut Runs) -> Outcome {
    let full = runs.full();
    let gains: Vec<f64> = full.iter().map(|r| r.trained - r.initial).collect();
    let slowest = full.iter().map(|r| r.took).max().unwrap();
    let per_seed: Vec<String> = full.iter().map(|r| format!("{:.2} vs {:.2}", r.trained, r.initial)).collect();
    let gain = median(gains);
    let rot5: Vec<String> = full.iter().map(|r| format!("{:.2}", r.rot5_err_deg)).collect();
    let mono: Vec<String> = full.iter().map(|r| r.monotone.to_string()).collect();
    outcome(
        gain >= 0.20 && slowest < Duration::from_secs(30 * 60),
        format!(
            "recall trained vs init per seed [{}], median gain {:+.0}pp, slowest run {}; 5 deg z-turn error [{}] deg; nonincreasing residuals [{}]/100",
            per_seed.join(", "),
            gain * 100.0,
            secs(slowest),
            rot5.join(", "),
            mono.join(", ")
        ),
    )
}

fn ablation_direction(runs: &mut Runs) -> Outcome {
    let full: Vec<f64> = runs.full().iter().map(|r| r.trained).collect();
    let recon: Vec<f64> = (0..3)
        .map(|seed| run_protocol(&runs.root, &format!("recon_seed{seed}"), &protocol_config(seed, LossConfig::reconstruction_only())).trained)
        .collect();
    let (f, r) = (median(full.clone()), median(recon.clone()));
    outcome(f >= r, format!("median recall full {f:.2} {:?} vs reconstruction-only {r:.2} {recon:?}", full))
}

fn rotation_awareness() -> Outcome {
    let cfg = ExperimentConfig::default();
    let cyl = exp::awareness_cloud(ShapeKind::Cylinder, 512, 0).unwrap();
    let blob = exp::awareness_cloud(ShapeKind::Blob, 512, 0).unwrap();
    let curve = |c: &PointCloud, angles: &[f64]| metrics::rotation_awareness(c.points(), [0.0, 0.0, 1.0], angles).unwrap();
    let cyl_curve = curve(&cyl, &cfg.sweeps.angles_rad);
    let cyl_max = cyl_curve.iter().map(|p| p.1).fold(0.0, f64::max);
    let fine: Vec<f64> = (0..=20).map(|i| i as f64 * 0.01).collect();
    let blob_curve = curve(&blob, &fine);
    let increasing = blob_curve.windows(2).all(|w| w[1].1 > w[0].1);
    let zero = cyl_curve[0].1 == 0.0 && blob_curve[0].1 == 0.0;
    outcome(
        zero && cyl.len() == 512 && cyl_max < 1e-2 && increasing,
        format!(
            "chamfer at 0: {}/{}; cylinder max {cyl_max:.2e} over {} angles; blob strictly increasing on [0, 0.2]: {increasing} ({:.2e} at 0.2)",
            cyl_curve[0].1,
            blob_curve[0].1,
            cyl_curve.len(),
            blob_curve[20].1
        ),
    )
}

fn success_logic() -> Outcome {
    let t = ExperimentConfig::default().thresholds;
    let hit = EvalRecord::from_errors(1.9, 0.009).is_success(t.rot_deg, t.trans);
    let miss = EvalRecord::from_errors(2.0, 0.01).is_success(t.rot_deg, t.trans);
    outcome(hit && !miss, format!("(1.9, 0.009) success {hit}, (2.0, 0.01) success {miss}"))
}

fn determinism(runs: &mut Runs) -> Outcome {
    let first = runs.full()[0].dir.clone();
    let again = run_protocol(&runs.root, "full_seed0_repeat", &protocol_config(0, LossConfig::default()));
    let files = [LOG_FILE, CHECKPOINT_FILE, "model.dvdr.json", "model.dvdr.adam"];
    let differing: Vec<&str> =
        files.iter().copied().filter(|f| fs::read(first.join(f)).ok() != fs::read(again.dir.join(f)).ok()).collect();
    outcome(differing.is_empty(), format!("compared {} (differing: {:?})", files.join(", "), differing))
}

fn main() {
    let selected: Option<Vec<u32>> =
        std::env::var("DVD_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().map_or(true, |s| s.contains(&n));
    let mut runs = Runs { root: Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"), full: Vec::new() };

    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut(&mut Runs) -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = f(&mut runs);
        if !o.pass {
            failed += 1;
        }
        println!("criterion {n:>2} {name:<22} {}  {} [{}]", if o.pass { "PASS" } else { "FAIL" }, o.detail, secs(start.elapsed()));
    };
    report(1, "lie group", &mut |_| lie_group());
    report(2, "gradients", &mut |_| gradients());
    report(3, "oracle equivalence", &mut |_| oracles());
    report(4, "icp oracle", &mut |_| icp());
    report(5, "loss identities", &mut |_| loss_identities());
    report(6, "training efficacy", &mut training_efficacy);
    report(7, "ablation direction", &mut ablation_direction);
    report(8, "rotation awareness", &mut |_| rotation_awareness());
    report(9, "success criterion", &mut |_| success_logic());
    report(10, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
