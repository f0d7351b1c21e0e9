//! Network heads: the PointNet-style global encoder, the feature-change
//! metric, the two-stage folding decoder and the normal head.
//!
//! Layers that consume `(per-point features, descriptor)` concatenations keep
//! two weight blocks, one per operand; `[p, d] W = p W_p + d W_d` exactly, and
//! the descriptor block is evaluated once instead of once per point.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::diffnet::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};

/// K-dimensional global (or feature-change) descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Descriptor length K.
    pub descriptor_dim: usize,
    /// Hidden widths of the shared per-point MLP; the last layer maps to K.
    pub encoder_widths: Vec<usize>,
    /// The decoder folds an `m x m` lattice.
    pub grid_size: usize,
    pub fold_width: usize,
    pub normal_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            descriptor_dim: 128,
            encoder_widths: vec![64, 64, 64, 128],
            grid_size: 16,
            fold_width: 128,
            normal_width: 64,
        }
    }
}

impl ModelConfig {
    /// K = 1024 with a 45 x 45 folding lattice.
    pub fn paper_scale() -> Self {
        ModelConfig { descriptor_dim: 1024, grid_size: 45, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0
            || self.grid_size == 0
            || self.fold_width == 0
            || self.normal_width == 0
            || self.encoder_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::invalid("model widths and sizes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// Dense layer over a `(point features, descriptor)` concatenation.
#[derive(Debug, Clone, Copy)]
struct SplitDense {
    w_point: ParamId,
    w_desc: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Dense>,
    metric: Dense,
    fold1: (SplitDense, Dense, Dense),
    fold2: (SplitDense, Dense, Dense),
    normal: (SplitDense, Dense, Dense),
}

/// Trainable weights plus the architecture that owns them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
    layout: Layout,
    grid: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, fan_in: usize, rows: usize, cols: usize) -> Tensor {
        let normal = Normal::new(0.0, linalg::sqrt(2.0 / fan_in as f64)).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data).expect("sized above")
    }
}

fn dense(ps: &mut ParameterSet, init: &mut Init, name: &str, a: usize, b: usize) -> Result<Dense> {
    Ok(Dense {
        w: ps.add(&format!("{name}.w"), init.he(a, a, b))?,
        b: ps.add(&format!("{name}.b"), Tensor::zeros(&[b]))?,
    })
}

fn split_dense(ps: &mut ParameterSet, init: &mut Init, name: &str, p: usize, k: usize, b: usize) -> Result<SplitDense> {
    Ok(SplitDense {
        w_point: ps.add(&format!("{name}.w_point"), init.he(p + k, p, b))?,
        w_desc: ps.add(&format!("{name}.w_desc"), init.he(p + k, k, b))?,
        b: ps.add(&format!("{name}.b"), Tensor::zeros(&[b]))?,
    })
}

/// Cell-centered `m x m` lattice on the unit square.
fn unit_grid(m: usize) -> Tensor {
    let mut data = Vec::with_capacity(2 * m * m);
    for i in 0..m {
        for j in 0..m {
            data.push((i as f64 + 0.5) / m as f64);
            data.push((j as f64 + 0.5) / m as f64);
        }
    }
    Tensor::matrix(m * m, 2, data).expect("sized above")
}

impl Model {
    /// Builds a model with He-initialized weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut ps = ParameterSet::new();
        let k = config.descriptor_dim;

        let mut widths = vec![3];
        widths.extend_from_slice(&config.encoder_widths);
        widths.push(k);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| dense(&mut ps, &mut init, &format!("encoder.{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;

        let metric = dense(&mut ps, &mut init, "metric", 2 * k, k)?;

        let fw = config.fold_width;
        let fold1 = (
            split_dense(&mut ps, &mut init, "fold1.0", 2, k, fw)?,
            dense(&mut ps, &mut init, "fold1.1", fw, fw)?,
            dense(&mut ps, &mut init, "fold1.2", fw, 3)?,
        );
        let fold2 = (
            split_dense(&mut ps, &mut init, "fold2.0", 3, k, fw)?,
            dense(&mut ps, &mut init, "fold2.1", fw, fw)?,
            dense(&mut ps, &mut init, "fold2.2", fw, 3)?,
        );
        let nw = config.normal_width;
        let normal = (
            split_dense(&mut ps, &mut init, "normal.0", 3, k, nw)?,
            dense(&mut ps, &mut init, "normal.1", nw, nw)?,
            dense(&mut ps, &mut init, "normal.2", nw, 3)?,
        );
        let grid = unit_grid(config.grid_size);
        Ok(Model { config, params: ps, layout: Layout { encoder, metric, fold1, fold2, normal }, grid })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Parameter ids of the global encoder, in layer order.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.layout.encoder.iter().flat_map(|d| [d.w, d.b]).collect()
    }

    pub fn metric_param_ids(&self) -> [ParamId; 2] {
        [self.layout.metric.w, self.layout.metric.b]
    }

    /// A tape reading this model's parameters.
    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    fn dense_var(&self, tape: &mut Tape<'_>, layer: Dense, x: Var, relu: bool) -> Result<Var> {
        let w = tape.param(layer.w);
        let b = tape.param(layer.b);
        let y = tape.linear(x, w, Some(b))?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// `relu([x_i, d] W + b)` for every row `x_i`.
    fn split_dense_var(&self, tape: &mut Tape<'_>, layer: SplitDense, x: Var, d: Var) -> Result<Var> {
        let wp = tape.param(layer.w_point);
        let wd = tape.param(layer.w_desc);
        let b = tape.param(layer.b);
        let per_point = tape.linear(x, wp, None)?;
        let shared = tape.linear(d, wd, Some(b))?;
        let y = tape.add_row_broadcast(per_point, shared)?;
        tape.relu(y)
    }

    /// Global descriptor of an `n x 3` point matrix: shared per-point MLP
    /// followed by a columnwise max-pool.
    pub fn encode_var(&self, tape: &mut Tape<'_>, points: Var) -> Result<Var> {
        let mut h = points;
        for layer in &self.layout.encoder {
            h = self.dense_var(tape, *layer, h, true)?;
        }
        tape.max_pool_points(h)
    }

    pub fn encode_points(&self, points: &[Vec3]) -> Result<Descriptor> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud("cannot encode an empty point set"));
        }
        let mut tape = self.tape();
        let x = tape.constant(Tensor::from_rows(points));
        let d = self.encode_var(&mut tape, x)?;
        Ok(Descriptor(tape.value(d).data().to_vec()))
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Descriptor> {
        self.encode_points(cloud.points())
    }

    /// `FC(d_orig ++ d_trans)`: the change of a region's descriptor under a
    /// transform.
    pub fn feature_change_var(&self, tape: &mut Tape<'_>, d_orig: Var, d_trans: Var) -> Result<Var> {
        let k = self.config.descriptor_dim;
        for v in [d_orig, d_trans] {
            if tape.value(v).len() != k {
                return Err(Error::ShapeMismatch {
                    op: "feature_change",
                    detail: format!("descriptor of length {} for K = {k}", tape.value(v).len()),
                });
            }
        }
        let cat = tape.concat(d_orig, d_trans)?;
        self.dense_var(tape, self.layout.metric, cat, false)
    }

    pub fn feature_change(&self, d_orig: &Descriptor, d_trans: &Descriptor) -> Result<Descriptor> {
        let mut tape = self.tape();
        let a = tape.constant(Tensor::vector(d_orig.0.clone()));
        let b = tape.constant(Tensor::vector(d_trans.0.clone()));
        let t = self.feature_change_var(&mut tape, a, b)?;
        Ok(Descriptor(tape.value(t).data().to_vec()))
    }

    /// Folds the lattice twice, conditioned on `d`, into `m^2 x 3` points.
    pub fn decode_var(&self, tape: &mut Tape<'_>, d: Var) -> Result<Var> {
        let grid = tape.constant(self.grid.clone());
        let (a, b, c) = self.layout.fold1;
        let h = self.split_dense_var(tape, a, grid, d)?;
        let h = self.dense_var(tape, b, h, true)?;
        let fold1 = self.dense_var(tape, c, h, false)?;
        let (a, b, c) = self.layout.fold2;
        let h = self.split_dense_var(tape, a, fold1, d)?;
        let h = self.dense_var(tape, b, h, true)?;
        self.dense_var(tape, c, h, false)
    }

    pub fn decode(&self, d: &Descriptor) -> Result<PointCloud> {
        let mut tape = self.tape();
        let dv = tape.constant(Tensor::vector(d.0.clone()));
        let out = self.decode_var(&mut tape, dv)?;
        let pts = tape.value(out).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        PointCloud::from_points(pts)
    }

    /// Raw (unnormalized) normal predictions for an `n x 3` point matrix.
    pub fn normals_var(&self, tape: &mut Tape<'_>, points: Var, d: Var) -> Result<Var> {
        let (a, b, c) = self.layout.normal;
        let h = self.split_dense_var(tape, a, points, d)?;
        let h = self.dense_var(tape, b, h, true)?;
        self.dense_var(tape, c, h, false)
    }

    /// Unit normal predicted for `point` given the cloud descriptor `d`.
    pub fn estimate_normal(&self, point: Vec3, d: &Descriptor) -> Result<Vec3> {
        let mut tape = self.tape();
        let p = tape.constant(Tensor::from_rows(&[point]));
        let dv = tape.constant(Tensor::vector(d.0.clone()));
        let raw = self.normals_var(&mut tape, p, dv)?;
        let r = tape.value(raw).data();
        let v = [r[0], r[1], r[2]];
        let n = linalg::norm(v);
        if n < 1e-12 {
            return Err(Error::DegenerateNormal);
        }
        Ok(linalg::scale(v, 1.0 / n))
    }
}
