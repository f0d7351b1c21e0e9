//! Training runs, evaluation protocols and sweep reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dvd_core::cloud::{self, PointCloud};
use dvd_core::metrics::{self, EvalRecord, MetricsTable};
use dvd_core::shapes::{self, ShapeKind};
use dvd_core::solver::{register_iclk, DescriptorFn};
use dvd_core::trainer::{build_dataset, EpochReport, ShapeSource, TrainConfig, TrainSample, Trainer};
use dvd_core::{Model, SolverConfig};
use serde::Serialize;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};
use crate::io;

pub const LOG_HEADER: &str = "epoch,total,primary,chamfer,normal,rot_err_deg,trans_err";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.dvdr";

/// Offset separating held-out seeds from training seeds.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000_0000;

/// Shape files (`.off` meshes, `.ply` clouds) in a directory, by file name.
pub fn load_shape_dir(dir: &Path) -> Result<Vec<ShapeSource>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("off" | "ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .off or .ply files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("off") => io::load_off(p).map(ShapeSource::Mesh),
            _ => io::load_ply(p).map(ShapeSource::Cloud),
        })
        .collect()
}

pub fn train_sources(cfg: &ExperimentConfig) -> Result<Vec<ShapeSource>> {
    match &cfg.dataset.mesh_dir {
        Some(dir) => load_shape_dir(dir),
        None => Ok(shapes::procedural_library(cfg.dataset.train_shapes, cfg.dataset.shape_seed)
            .into_iter()
            .map(ShapeSource::Mesh)
            .collect()),
    }
}

pub fn eval_sources(cfg: &ExperimentConfig) -> Result<Vec<ShapeSource>> {
    match &cfg.dataset.eval_mesh_dir {
        Some(dir) => load_shape_dir(dir),
        None => Ok(shapes::procedural_library(
            cfg.dataset.eval_shapes,
            cfg.dataset.shape_seed.wrapping_add(EVAL_SEED_OFFSET),
        )
        .into_iter()
        .map(ShapeSource::Mesh)
        .collect()),
    }
}

pub fn train_pairs(cfg: &ExperimentConfig) -> Result<Vec<TrainSample>> {
    Ok(build_dataset(&train_sources(cfg)?, &cfg.train_config())?)
}

/// Held-out pairs: held-out shapes, independent sampling and transform seeds.
pub fn eval_pairs(cfg: &ExperimentConfig) -> Result<Vec<TrainSample>> {
    let tc = TrainConfig { seed: cfg.seed.wrapping_add(EVAL_SEED_OFFSET), ..cfg.train_config() };
    Ok(build_dataset(&eval_sources(cfg)?, &tc)?)
}

pub fn log_row(r: &EpochReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch,
        r.loss.total,
        r.loss.primary,
        r.loss.chamfer,
        r.loss.normal,
        opt(r.rot_err_deg),
        opt(r.trans_err)
    )
}

pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<EpochReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn save_all(trainer: &Trainer, path: &Path) -> Result<()> {
    checkpoint::save_model(&trainer.model, path, trainer.epoch, Some(&trainer.config))?;
    checkpoint::save_adam(&trainer.adam, trainer.model.params(), checkpoint::adam_path(path))
}

/// Trains for `train.epochs` epochs (or the remainder after `resume`),
/// writing `train_log.csv` and `model.dvdr` into `out`.
pub fn run_training(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let tc = cfg.train_config();
    let data = train_pairs(cfg)?;
    let mut trainer = match resume {
        None => Trainer::new(tc)?,
        Some(path) => {
            let (model, meta) = checkpoint::load_model(path)?;
            let adam = checkpoint::load_adam(model.params(), checkpoint::adam_path(path))?;
            Trainer::resume(model, adam, meta.epoch, tc)?
        }
    };
    let log_path = out.join(LOG_FILE);
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path).map_err(io_err(&log_path))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        writeln!(f, "{LOG_HEADER}").map_err(io_err(&log_path))?;
        f
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut reports = Vec::new();
    while trainer.epoch < cfg.train.epochs {
        let report = trainer.train_epoch(&data)?;
        writeln!(log, "{}", log_row(&report)).map_err(io_err(&log_path))?;
        log.flush().map_err(io_err(&log_path))?;
        if cfg.checkpoint_every > 0 && report.epoch % cfg.checkpoint_every == 0 {
            save_all(&trainer, &ckpt)?;
        }
        progress(&report);
        reports.push(report);
    }
    save_all(&trainer, &ckpt)?;
    Ok(TrainOutcome { model: trainer.model, reports, checkpoint: ckpt, log: log_path })
}

/// IC-LK registration of every pair, in order.
pub fn evaluate<E: DescriptorFn + ?Sized>(enc: &E, pairs: &[TrainSample], solver: &SolverConfig) -> Result<Vec<EvalRecord>> {
    pairs
        .iter()
        .map(|p| {
            let start = Instant::now();
            let r = register_iclk(enc, &p.source, &p.target, solver)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            Ok(EvalRecord::new(p.transform, r.transform, ms, r.iterations_used))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub rot_thresh_deg: f64,
    pub trans_thresh: f64,
    pub recall: f64,
    pub metrics: MetricsTable,
}

pub fn summarize(records: &[EvalRecord], cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let t = cfg.thresholds;
    Ok(EvalSummary {
        pairs: records.len(),
        rot_thresh_deg: t.rot_deg,
        trans_thresh: t.trans,
        recall: metrics::recall(records, t.rot_deg, t.trans)?,
        metrics: metrics::metrics_table(records)?,
    })
}

/// Per-pair errors; runtimes are left out so reports are reproducible.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("pair,rot_err_deg,trans_err,iterations\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", r.rot_err_deg, r.trans_err, r.iterations);
    }
    s
}

pub fn sweep_header(axis: &str) -> String {
    format!("{axis},recall,{}", MetricsTable::CSV_HEADER)
}

fn sweep_row(value: f64, summary: &EvalSummary) -> String {
    format!("{},{:.4},{}", io::fmt_sig9(value), summary.recall, summary.metrics.csv_row())
}

fn pair_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Adds independent Gaussian noise to both clouds of every pair.
pub fn noisy_pairs(pairs: &[TrainSample], sigma: f64, seed: u64) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = pair_seed(seed, i);
            Ok(TrainSample {
                source: cloud::add_gaussian_noise(&p.source, sigma, s)?,
                target: cloud::add_gaussian_noise(&p.target, sigma, s ^ 1)?,
                transform: p.transform,
            })
        })
        .collect()
}

/// Crops both clouds of every pair to `keep` of their points, each seen from
/// its own random view direction.
pub fn partial_pairs(pairs: &[TrainSample], keep: f64, seed: u64) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = pair_seed(seed, i);
            Ok(TrainSample {
                source: cloud::crop_partial(&p.source, keep, s)?,
                target: cloud::crop_partial(&p.target, keep, s ^ 1)?,
                transform: p.transform,
            })
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Clean held-out evaluation: `eval.json` and `records.csv` in `out`.
pub fn run_eval(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<EvalSummary> {
    let records = evaluate(model, &eval_pairs(cfg)?, &cfg.solver)?;
    let summary = summarize(&records, cfg)?;
    write_file(&out.join("eval.json"), &(serde_json::to_string_pretty(&summary).expect("serializes") + "\n"))?;
    write_file(&out.join("records.csv"), &records_csv(&records))?;
    Ok(summary)
}

fn run_value_sweep(
    cfg: &ExperimentConfig,
    model: &Model,
    axis: &str,
    values: &[f64],
    perturb: impl Fn(&[TrainSample], f64) -> Result<Vec<TrainSample>>,
) -> Result<String> {
    let pairs = eval_pairs(cfg)?;
    let mut csv = sweep_header(axis) + "\n";
    for &v in values {
        let records = evaluate(model, &perturb(&pairs, v)?, &cfg.solver)?;
        let _ = writeln!(csv, "{}", sweep_row(v, &summarize(&records, cfg)?));
    }
    Ok(csv)
}

pub fn run_noise_sweep(cfg: &ExperimentConfig, model: &Model) -> Result<String> {
    cfg.require_sweep("noise")?;
    let seed = cfg.seed.wrapping_add(0x4E01_5E);
    run_value_sweep(cfg, model, "sigma", &cfg.sweeps.noise_sigma, |p, s| noisy_pairs(p, s, seed))
}

pub fn run_partial_sweep(cfg: &ExperimentConfig, model: &Model) -> Result<String> {
    cfg.require_sweep("partial")?;
    let seed = cfg.seed.wrapping_add(0x9A87_1A1);
    run_value_sweep(cfg, model, "keep_fraction", &cfg.sweeps.keep_fraction, |p, k| partial_pairs(p, k, seed))
}

/// Trains one model per local size (into `out/local_size_<n>`) and evaluates
/// each on the clean held-out pairs.
pub fn run_localsize_ablation(cfg: &ExperimentConfig, out: &Path, mut progress: impl FnMut(usize, &EpochReport)) -> Result<String> {
    cfg.require_sweep("ablation")?;
    let pairs = eval_pairs(cfg)?;
    let mut csv = sweep_header("local_size") + "\n";
    for &n in &cfg.sweeps.local_size {
        let mut c = cfg.clone();
        c.train.loss.local_size = n;
        let outcome = run_training(&c, &out.join(format!("local_size_{n}")), None, |r| progress(n, r))?;
        let records = evaluate(&outcome.model, &pairs, &cfg.solver)?;
        let _ = writeln!(csv, "{}", sweep_row(n as f64, &summarize(&records, cfg)?));
    }
    Ok(csv)
}

/// Cloud used by the rotation-awareness sweep. The cylinder is a regular
/// lattice on the lateral surface so that its symmetry about z is exact.
pub fn awareness_cloud(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    match kind {
        ShapeKind::Cylinder => {
            // dense rings keep the chord between lattice neighbors small
            let along = (n / 128).max(1);
            let around = n.div_ceil(along);
            Ok(shapes::cylinder_lattice(0.15, 1.0, around, along))
        }
        _ => {
            let sampled = cloud::sample_mesh(&shapes::procedural_mesh(kind, seed), n, seed)?;
            Ok(cloud::normalize_unit_sphere(&sampled)?.0)
        }
    }
}

pub const AWARENESS_HEADER: &str = "angle_rad,chamfer";

/// `angle_rad,chamfer` rows for rotations about the z axis.
pub fn run_rotation_awareness_sweep(cloud: &PointCloud, angles_rad: &[f64]) -> Result<String> {
    let rows = metrics::rotation_awareness(cloud.points(), [0.0, 0.0, 1.0], angles_rad)?;
    let mut csv = String::from(AWARENESS_HEADER) + "\n";
    for (a, c) in rows {
        let _ = writeln!(csv, "{},{}", io::fmt_sig9(a), io::fmt_sig9(c));
    }
    Ok(csv)
}

pub fn write_report(out: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = out.join(name);
    write_file(&path, text)?;
    Ok(path)
}
