//! Experiment configuration (JSON). Every field has a default, so `{}` is a
//! valid config describing the desk-scale protocol.

use std::fs;
use std::path::{Path, PathBuf};

use dvd_core::trainer::TrainConfig;
use dvd_core::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Procedural training shapes (ignored when `mesh_dir` is set).
    pub train_shapes: usize,
    /// Procedural held-out shapes (ignored when `eval_mesh_dir` is set).
    pub eval_shapes: usize,
    /// Seed of the procedural shape parameters.
    pub shape_seed: u64,
    /// Directory of `.off` / `.ply` files used as training shapes.
    pub mesh_dir: Option<PathBuf>,
    /// Directory of `.off` / `.ply` files used as held-out shapes.
    pub eval_mesh_dir: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { train_shapes: 200, eval_shapes: 100, shape_seed: 1, mesh_dir: None, eval_mesh_dir: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { rot_deg: 2.0, trans: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweeps {
    pub noise_sigma: Vec<f64>,
    pub keep_fraction: Vec<f64>,
    pub local_size: Vec<usize>,
    /// Rotation-awareness grid in radians.
    pub angles_rad: Vec<f64>,
    /// Points sampled for the rotation-awareness sweep.
    pub awareness_points: usize,
}

impl Default for Sweeps {
    fn default() -> Self {
        Sweeps {
            noise_sigma: vec![0.0, 0.01, 0.02, 0.04],
            keep_fraction: vec![1.0, 0.9, 0.8, 0.7],
            local_size: vec![32, 64, 96],
            angles_rad: (0..=30).map(|i| i as f64 * 0.1).collect(),
            awareness_points: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; overrides `train.seed`.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Solver used for evaluation (training uses `train.solver`).
    pub solver: SolverConfig,
    pub checkpoint: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub thresholds: Thresholds,
    pub sweeps: Sweeps,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            checkpoint: None,
            checkpoint_every: 10,
            thresholds: Thresholds::default(),
            sweeps: Sweeps::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The training config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.solver.validate()?;
        let t = self.thresholds;
        if !(t.rot_deg > 0.0) || !(t.trans > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.dataset.mesh_dir.is_none() && self.dataset.train_shapes == 0 {
            return Err(Error::Config("dataset.train_shapes must be at least 1".into()));
        }
        if self.dataset.eval_mesh_dir.is_none() && self.dataset.eval_shapes == 0 {
            return Err(Error::Config("dataset.eval_shapes must be at least 1".into()));
        }
        if self.sweeps.noise_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("sweeps.noise_sigma entries must be nonnegative".into()));
        }
        if self.sweeps.keep_fraction.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("sweeps.keep_fraction entries must lie in (0, 1]".into()));
        }
        if self.sweeps.local_size.contains(&0) {
            return Err(Error::Config("sweeps.local_size entries must be at least 1".into()));
        }
        Ok(())
    }

    /// Errors unless the named sweep list is nonempty.
    pub fn require_sweep(&self, name: &str) -> Result<()> {
        let empty = match name {
            "noise" => self.sweeps.noise_sigma.is_empty(),
            "partial" => self.sweeps.keep_fraction.is_empty(),
            "ablation" => self.sweeps.local_size.is_empty(),
            "rotation" => self.sweeps.angles_rad.is_empty() || self.sweeps.awareness_points == 0,
            _ => return Err(Error::Config(format!("unknown sweep `{name}`"))),
        };
        if empty {
            return Err(Error::Config(format!("sweep `{name}` needs a nonempty axis")));
        }
        Ok(())
    }
}

pub const SCHEMA_HELP: &str = "\
experiment config (JSON, every field optional):
  seed                      master seed (u64)
  dataset.train_shapes      procedural training shapes (200)
  dataset.eval_shapes       procedural held-out shapes (100)
  dataset.shape_seed        seed of the procedural shapes (1)
  dataset.mesh_dir          directory of .off/.ply training shapes
  dataset.eval_mesh_dir     directory of .off/.ply held-out shapes
  train.epochs              (100)          train.points_per_cloud   (256)
  train.transforms_per_shape (1)           train.rot_max_deg        (45)
  train.trans_max           (0.5)          train.normal_k           (16)
  train.register_every      (1, 0 = off)
  train.model               {descriptor_dim 128, encoder_widths [64,64,64,128],
                             grid_size 16, fold_width 128, normal_width 64}
  train.adam                {lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8}
  train.loss                {lambda1 0.5, lambda2 0.1, local_size 64,
                             outlier {\"median_multiple\": 3.0} | {\"fixed\": c},
                             global_alignment true, local_consistency true}
  train.solver, solver      {max_iterations 10, delta_threshold 1e-7,
                             jacobian_step 1e-2, damping 1e-9}
  checkpoint                model checkpoint path for register/eval/sweep
  checkpoint_every          epochs between checkpoints (10, 0 = end only)
  thresholds                {rot_deg 2.0, trans 0.01}
  sweeps                    {noise_sigma [0,0.01,0.02,0.04], keep_fraction [1,0.9,0.8,0.7],
                             local_size [32,64,96], angles_rad 0..3 step 0.1,
                             awareness_points 512}";
