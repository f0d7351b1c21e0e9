//! Alternating optimization: one Adam step on the total loss per sample,
//! then a frozen-encoder IC-LK registration of the same pair for logging.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, PointCloud, TriangleMesh};
use crate::diffnet::{adam_step, AdamConfig, AdamState, ParamGrads};
use crate::error::{Error, Result};
use crate::geom3d::{self, RigidTransform};
use crate::losses::{sample_loss, LossBreakdown, LossConfig};
use crate::metrics::EvalRecord;
use crate::model::{Model, ModelConfig};
use crate::solver::{register_iclk, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub points_per_cloud: usize,
    /// Sampled ground-truth transforms per shape source.
    pub transforms_per_shape: usize,
    /// Euler angles are drawn from `[0, rot_max_deg]`.
    pub rot_max_deg: f64,
    /// Translation components are drawn from `[-trans_max, trans_max]`.
    pub trans_max: f64,
    /// Neighborhood size for PCA normals of sources without normals.
    pub normal_k: usize,
    pub seed: u64,
    /// Run the IC-LK phase every this many epochs; 0 disables it.
    pub register_every: usize,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            points_per_cloud: 256,
            transforms_per_shape: 1,
            rot_max_deg: 45.0,
            trans_max: 0.5,
            normal_k: 16,
            seed: 0,
            register_every: 1,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.points_per_cloud == 0 || self.transforms_per_shape == 0 || self.normal_k == 0 {
            return Err(Error::invalid("epochs, points_per_cloud, transforms_per_shape and normal_k must be at least 1"));
        }
        if !(self.rot_max_deg >= 0.0) || !(self.trans_max >= 0.0) {
            return Err(Error::invalid("transform ranges must be nonnegative"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeSource {
    Mesh(TriangleMesh),
    Cloud(PointCloud),
}

impl ShapeSource {
    /// `n` points of the shape; meshes are sampled uniformly by area, clouds
    /// are subsampled (with replacement only when they are too small).
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        match self {
            ShapeSource::Mesh(m) => cloud::sample_mesh(m, n, seed),
            ShapeSource::Cloud(c) => {
                if c.is_empty() {
                    return Err(Error::TooFewPoints { needed: 1, got: 0 });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx: Vec<usize> = if c.len() >= n {
                    let mut all: Vec<usize> = (0..c.len()).collect();
                    all.shuffle(&mut rng);
                    all.truncate(n);
                    all
                } else {
                    (0..n).map(|_| rng.gen_range(0..c.len())).collect()
                };
                Ok(c.select(&idx))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Normalized source cloud with normals.
    pub source: PointCloud,
    /// `transform` applied to an independent resample of the same shape,
    /// normalized with the source's center and scale.
    pub target: PointCloud,
    pub transform: RigidTransform,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ensure_normals(c: PointCloud, k: usize) -> Result<PointCloud> {
    if c.normals().is_some() {
        Ok(c)
    } else {
        cloud::estimate_normals_pca(&c, k.min(c.len().saturating_sub(1)))
    }
}

/// One pair per (shape, transform slot). Deterministic in `cfg.seed`.
pub fn build_dataset(sources: &[ShapeSource], cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    if sources.is_empty() {
        return Err(Error::invalid("at least one shape source is required"));
    }
    let mut out = Vec::with_capacity(sources.len() * cfg.transforms_per_shape);
    for (i, src) in sources.iter().enumerate() {
        for slot in 0..cfg.transforms_per_shape {
            let base = mix(cfg.seed, i as u64, slot as u64);
            let x = ensure_normals(src.sample(cfg.points_per_cloud, mix(base, 1, 0))?, cfg.normal_k)?;
            let x2 = ensure_normals(src.sample(cfg.points_per_cloud, mix(base, 2, 0))?, cfg.normal_k)?;
            let (source, center, scale) = cloud::normalize_unit_sphere(&x)?;
            let resample = cloud::rescale(&x2, center, scale);
            let transform = geom3d::sample_transform(mix(base, 3, 0), cfg.rot_max_deg, cfg.trans_max);
            let target = geom3d::apply(&transform, &resample);
            out.push(TrainSample { source, target, transform });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean IC-LK errors over the epoch, when the registration phase ran.
    pub rot_err_deg: Option<f64>,
    pub trans_err: Option<f64>,
    pub steps: usize,
}

pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    grads: ParamGrads,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), mix(config.seed, 0x6d6f_6465_6c, 0))?;
        let adam = AdamState::new(model.params());
        Ok(Self::from_parts(model, adam, 0, config))
    }

    /// Resumes from saved parameters, optimizer state and epoch counter.
    pub fn resume(model: Model, adam: AdamState, epoch: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::invalid("checkpoint model config differs from the training config"));
        }
        if adam.m.len() != model.params().len() {
            return Err(Error::LengthMismatch { left: model.params().len(), right: adam.m.len() });
        }
        Ok(Self::from_parts(model, adam, epoch, config))
    }

    fn from_parts(model: Model, adam: AdamState, epoch: usize, config: TrainConfig) -> Self {
        let grads = ParamGrads::zeros_like(model.params());
        Trainer { model, adam, epoch, config, grads }
    }

    /// Loss evaluation, backward pass and one Adam update.
    pub fn train_step(&mut self, sample: &TrainSample) -> Result<LossBreakdown> {
        self.grads.reset();
        let breakdown = {
            let mut tape = self.model.tape();
            let loss = sample_loss(
                &mut tape,
                &self.model,
                &sample.source,
                &sample.target,
                &sample.transform,
                &self.config.loss,
            )?;
            let b = loss.breakdown(&tape, &self.config.loss);
            if !b.total.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "loss at epoch {} step {}: primary {} chamfer {} normal {}",
                    self.epoch + 1,
                    self.adam.step + 1,
                    b.primary,
                    b.chamfer,
                    b.normal
                )));
            }
            tape.backward(loss.total, &mut self.grads)?;
            b
        };
        adam_step(self.model.params_mut(), &self.grads, &self.config.adam, &mut self.adam)?;
        Ok(breakdown)
    }

    /// Frozen-parameter IC-LK registration of a pair.
    pub fn register(&self, sample: &TrainSample) -> Result<EvalRecord> {
        let r = register_iclk(&self.model, &sample.source, &sample.target, &self.config.solver)?;
        Ok(EvalRecord::new(sample.transform, r.transform, 0.0, r.iterations_used))
    }

    /// Visiting order of epoch `epoch` (0-based).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, 0x7368_7566, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    pub fn train_epoch(&mut self, dataset: &[TrainSample]) -> Result<EpochReport> {
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let order = self.epoch_order(dataset.len(), self.epoch);
        let do_register = self.config.register_every > 0 && (self.epoch + 1) % self.config.register_every == 0;
        let mut losses = Vec::with_capacity(dataset.len());
        let (mut rot, mut trans) = (0.0, 0.0);
        for &i in &order {
            losses.push(self.train_step(&dataset[i])?);
            if do_register {
                let rec = self.register(&dataset[i])?;
                rot += rec.rot_err_deg;
                trans += rec.trans_err;
            }
        }
        self.epoch += 1;
        let n = dataset.len() as f64;
        Ok(EpochReport {
            epoch: self.epoch,
            loss: LossBreakdown::mean(&losses),
            rot_err_deg: do_register.then_some(rot / n),
            trans_err: do_register.then_some(trans / n),
            steps: dataset.len(),
        })
    }
}
