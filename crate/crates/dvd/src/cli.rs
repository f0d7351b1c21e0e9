//! `dvd` command-line interface. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dvd_core::shapes::ShapeKind;
use dvd_core::solver::{register_icp, register_iclk};
use dvd_core::{Model, RegistrationResult};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{ExperimentConfig, SCHEMA_HELP};
use crate::error::Error;
use crate::experiments as exp;
use crate::io;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dvd", version, about = "Point-cloud registration with learned descriptors and IC-LK")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write training and held-out pairs as PLY files plus their transforms
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes train_log.csv and model.dvdr
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Register SOURCE onto TARGET with a trained model
    Register {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Register SOURCE onto TARGET with point-to-point ICP
    Icp {
        source: PathBuf,
        target: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Clean evaluation on held-out pairs
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Noise, partial-overlap, local-size or rotation-awareness sweep
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Shape of the rotation-awareness sweep
        #[arg(long, value_enum, default_value_t = ShapeArg::Blob)]
        shape: ShapeArg,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SweepKind {
    Noise,
    Partial,
    Ablation,
    Rotation,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ShapeArg {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Blob,
}

impl From<ShapeArg> for ShapeKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Sphere => ShapeKind::Sphere,
            ShapeArg::Box => ShapeKind::Box,
            ShapeArg::Cylinder => ShapeKind::Cylinder,
            ShapeArg::Torus => ShapeKind::Torus,
            ShapeArg::Blob => ShapeKind::Blob,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(format!("{e}\n\n{SCHEMA_HELP}")),
            other => Failure::Runtime(other),
        }
    }
}

impl From<dvd_core::Error> for Failure {
    fn from(e: dvd_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult = Result<(), Failure>;

#[derive(Serialize)]
struct RegistrationJson<'a> {
    #[serde(flatten)]
    result: &'a RegistrationResult,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(Error::Io { path, source }) => {
                return Err(Failure::Usage(format!("--config {}: {source}", path.display())))
            }
            Err(e) => return Err(e.into()),
        },
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn require_checkpoint(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> Result<(Model, PathBuf), Failure> {
    let path = flag.clone().or_else(|| cfg.checkpoint.clone()).ok_or_else(|| {
        Failure::Usage("missing --checkpoint <path> (or `checkpoint` in the config)".into())
    })?;
    if !path.exists() {
        return Err(Failure::Usage(format!("--checkpoint {}: file not found", path.display())));
    }
    Ok((checkpoint::load_model(&path)?.0, path))
}

fn emit_json(value: &impl Serialize, out: Option<&Path>, name: &str, stdout: &mut dyn Write) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    match out {
        Some(dir) => {
            exp::write_report(dir, name, &text)?;
        }
        None => {
            let _ = stdout.write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn execute(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            for (split, pairs) in [("train", exp::train_pairs(&cfg)?), ("eval", exp::eval_pairs(&cfg)?)] {
                let dir = out.join(split);
                let mut transforms = Vec::with_capacity(pairs.len());
                for (i, p) in pairs.iter().enumerate() {
                    std::fs::create_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
                    io::save_ply(&p.source, dir.join(format!("pair_{i:04}_source.ply")))?;
                    io::save_ply(&p.target, dir.join(format!("pair_{i:04}_target.ply")))?;
                    transforms.push(p.transform);
                }
                emit_json(&transforms, Some(&dir), "transforms.json", stdout)?;
                let _ = writeln!(stderr, "{split}: {} pairs in {}", pairs.len(), dir.display());
            }
            Ok(())
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            if let Some(r) = &resume {
                if !r.exists() {
                    return Err(Failure::Usage(format!("--resume {}: file not found", r.display())));
                }
            }
            let out = out_dir(&common);
            let outcome = exp::run_training(&cfg, &out, resume.as_deref(), |r| {
                let _ = writeln!(stderr, "{}", exp::log_row(r));
            })?;
            let _ = writeln!(stdout, "{}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Register { source, target, checkpoint, common } => {
            let cfg = load_config(&common)?;
            let (model, _) = require_checkpoint(&checkpoint, &cfg)?;
            let (x, y) = (io::load_ply(&source)?, io::load_ply(&target)?);
            let result = register_iclk(&model, &x, &y, &cfg.solver)?;
            emit_json(&RegistrationJson { result: &result }, common.out.as_deref(), "register.json", stdout)
        }
        Command::Icp { source, target, max_iters, tol, common } => {
            let (x, y) = (io::load_ply(&source)?, io::load_ply(&target)?);
            if max_iters == 0 {
                return Err(Failure::Usage("--max-iters must be at least 1".into()));
            }
            let result = register_icp(&x, &y, max_iters, tol)?;
            emit_json(&RegistrationJson { result: &result }, common.out.as_deref(), "icp.json", stdout)
        }
        Command::Eval { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let (model, _) = require_checkpoint(&checkpoint, &cfg)?;
            let summary = exp::run_eval(&cfg, &model, &out_dir(&common))?;
            emit_json(&summary, None, "", stdout)
        }
        Command::Sweep { kind, checkpoint, shape, common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common);
            let (name, csv) = match kind {
                SweepKind::Noise => {
                    cfg.require_sweep("noise")?;
                    let (model, _) = require_checkpoint(&checkpoint, &cfg)?;
                    ("noise_sweep.csv", exp::run_noise_sweep(&cfg, &model)?)
                }
                SweepKind::Partial => {
                    cfg.require_sweep("partial")?;
                    let (model, _) = require_checkpoint(&checkpoint, &cfg)?;
                    ("partial_sweep.csv", exp::run_partial_sweep(&cfg, &model)?)
                }
                SweepKind::Ablation => {
                    let csv = exp::run_localsize_ablation(&cfg, &out, |n, r| {
                        let _ = writeln!(stderr, "local_size {n}: {}", exp::log_row(r));
                    })?;
                    ("local_size_ablation.csv", csv)
                }
                SweepKind::Rotation => {
                    cfg.require_sweep("rotation")?;
                    let cloud = exp::awareness_cloud(shape.into(), cfg.sweeps.awareness_points, cfg.seed)?;
                    ("rotation_awareness.csv", exp::run_rotation_awareness_sweep(&cloud, &cfg.sweeps.angles_rad)?)
                }
            };
            let path = exp::write_report(&out, name, &csv)?;
            let _ = writeln!(stdout, "{}", path.display());
            Ok(())
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}
