//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use dvd_core::diffnet::{ParamGrads, ParameterSet, Tape, Tensor, Var};
use dvd_core::losses::{sample_loss, LossConfig};
use dvd_core::{cloud, geom3d, linalg, Model, ModelConfig, PointCloud, Result, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Step for whole-model checks: small enough that Chamfer nearest-neighbor
/// assignments and relu patterns stay fixed between the two evaluations.
pub const MODEL_FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, half_extent: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
                rng.gen_range(-half_extent..half_extent),
            ]
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes to the checked gradient.
fn scalarize(tape: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let w = random_tensor(&mut rng(seed), &shape, 0.5, 1.5);
    let w = tape.constant(w);
    let weighted = tape.mul(out, w)?;
    tape.sum(weighted)
}

/// Largest relative error (over inputs) between tape gradients of `f` and
/// central differences.
pub fn input_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        let s = scalarize(&mut t, out, 99).unwrap();
        t.scalar(s)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.input(v.clone())).collect();
    let out = f(&mut t, &vars).unwrap();
    let s = scalarize(&mut t, out, 99).unwrap();
    let empty = ParameterSet::new();
    let grads = t.backward(s, &mut ParamGrads::empty(&empty)).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            numeric[k] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Relative error between parameter gradients of a model-level scalar loss
/// and central differences (step `h`) over every parameter entry.
pub fn param_grad_error<F>(model: &Model, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &Model) -> Result<Var>,
{
    let mut grads = ParamGrads::zeros_like(model.params());
    {
        let mut t = model.tape();
        let loss = f(&mut t, model).unwrap();
        t.backward(loss, &mut grads).unwrap();
    }
    let eval = |m: &Model| -> f64 {
        let mut t = m.tape();
        let loss = f(&mut t, m).unwrap();
        t.scalar(loss)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        analytic.extend_from_slice(grads.get(id).unwrap().data());
        for k in 0..model.params().get(id).len() {
            let orig = probe.params().get(id).data()[k];
            probe.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe);
            probe.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe);
            probe.params_mut().get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    relative_error(&analytic, &numeric)
}

/// All `(index, distance)` pairs sorted by `(squared distance, index)`.
pub fn brute_knn(points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
}

pub fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let directed = |x: &[Vec3], y: &[Vec3]| -> f64 {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    directed(a, b) + directed(b, a)
}

/// `pinv(J) r` via nalgebra's SVD pseudoinverse.
pub fn pinv_solve(j: &[f64], rows: usize, r: &[f64]) -> [f64; 6] {
    let m = nalgebra::DMatrix::from_row_slice(rows, 6, j);
    let p = m.pseudo_inverse(1e-300).unwrap();
    let x = p * nalgebra::DVector::from_column_slice(r);
    [x[0], x[1], x[2], x[3], x[4], x[5]]
}

pub type MakeInputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
pub type Op = fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

/// Entries kept away from zero so the relu kink is never crossed by a step.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(r, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn uniform(r: &mut ChaCha8Rng, shapes: &[&[usize]]) -> Vec<Tensor> {
    shapes.iter().map(|s| random_tensor(r, s, -1.0, 1.0)).collect()
}

/// Every tape primitive with an input generator suited to it.
pub fn primitives() -> Vec<(&'static str, MakeInputs, Op)> {
    vec![
        ("linear", |r| uniform(r, &[&[5, 4], &[4, 3], &[3]]), |t, v| t.linear(v[0], v[1], Some(v[2]))),
        ("linear_vec", |r| uniform(r, &[&[4], &[4, 2]]), |t, v| t.linear(v[0], v[1], None)),
        ("add", |r| uniform(r, &[&[3, 4], &[3, 4]]), |t, v| t.add(v[0], v[1])),
        ("sub", |r| uniform(r, &[&[3, 4], &[3, 4]]), |t, v| t.sub(v[0], v[1])),
        ("mul", |r| uniform(r, &[&[3, 4], &[3, 4]]), |t, v| t.mul(v[0], v[1])),
        ("scale", |r| uniform(r, &[&[3, 4]]), |t, v| t.scale(v[0], -2.5)),
        ("add_scalar", |r| uniform(r, &[&[3, 4], &[3, 4]]), |t, v| {
            let a = t.add_scalar(v[0], 0.7)?;
            t.mul(a, v[1])
        }),
        ("add_row_broadcast", |r| uniform(r, &[&[4, 3], &[3]]), |t, v| t.add_row_broadcast(v[0], v[1])),
        ("relu", |r| vec![away_from_zero(r, &[4, 5])], |t, v| t.relu(v[0])),
        ("log", |r| vec![random_tensor(r, &[6], 0.1, 2.0)], |t, v| t.log(v[0])),
        ("max_pool_points", |r| uniform(r, &[&[7, 4]]), |t, v| t.max_pool_points(v[0])),
        ("concat_vec", |r| uniform(r, &[&[3], &[2]]), |t, v| t.concat(v[0], v[1])),
        ("concat_mat", |r| uniform(r, &[&[3, 2], &[3, 4]]), |t, v| t.concat(v[0], v[1])),
        ("sum", |r| uniform(r, &[&[3, 3]]), |t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        }),
        ("mean", |r| uniform(r, &[&[3, 3]]), |t, v| {
            let s = t.mean(v[0])?;
            t.mul(s, s)
        }),
        ("softmax", |r| vec![random_tensor(r, &[6], -2.0, 2.0)], |t, v| t.softmax(v[0])),
        ("l2_norm", |r| uniform(r, &[&[5]]), |t, v| t.l2_norm(v[0])),
        ("cosine", |r| uniform(r, &[&[5], &[5]]), |t, v| t.cosine(v[0], v[1])),
        ("row_cosine", |r| uniform(r, &[&[4, 3], &[4, 3]]), |t, v| t.row_cosine(v[0], v[1])),
        ("chamfer", |r| uniform(r, &[&[6, 3], &[5, 3]]), |t, v| t.chamfer(v[0], v[1])),
    ]
}

pub fn toy_config() -> ModelConfig {
    ModelConfig { descriptor_dim: 8, encoder_widths: vec![8, 8], grid_size: 3, fold_width: 8, normal_width: 8 }
}

/// Relative gradient error of the full training loss over every parameter
/// of a toy model, on a 32-point cloud.
pub fn composite_grad_error(seed: u64) -> f64 {
    let cfg = LossConfig { local_size: 8, ..LossConfig::default() };
    let mut model = Model::new(toy_config(), seed).unwrap();
    let mut r = rng(1000 + seed);
    // zero biases put dead-unit rows exactly on the relu kink; move to a
    // generic point
    let ids: Vec<_> = model.params().iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
    }
    let pts = random_points(&mut r, 32, 1.0);
    let normals: Vec<_> = pts.iter().map(|p| linalg::scale(*p, 1.0 / linalg::norm(*p))).collect();
    let x = PointCloud::new(pts, Some(normals)).unwrap();
    let w = geom3d::sample_transform(seed, 45.0, 0.5);
    // a perturbed copy keeps the alignment norm away from its kink at 0
    let y = geom3d::apply(&w, &cloud::add_gaussian_noise(&x, 0.05, seed).unwrap());
    param_grad_error(&model, MODEL_FD_STEP, |t, m| Ok(sample_loss(t, m, &x, &y, &w, &cfg)?.total))
}
