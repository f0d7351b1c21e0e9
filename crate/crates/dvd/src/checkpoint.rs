//! Binary parameter checkpoints with a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DVDR" | version: u16 | count: u32 |
//! count x ( name_len: u32 | name: utf-8 | rank: u32 | dims: rank x u64 | values: f64 )
//! ```
//!
//! The sidecar `<file>.json` records the model hyperparameters and the epoch
//! counter; the optimizer moments live in `<file>.adam` with the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use dvd_core::diffnet::{AdamState, ParameterSet, Tensor};
use dvd_core::trainer::TrainConfig;
use dvd_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"DVDR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub model: ModelConfig,
    /// Completed training epochs.
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn adam_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

pub fn encode_tensors<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (needed {n} more)", self.pos)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic, not a DVDR checkpoint".into());
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "parameter name is not utf-8".to_string())?;
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(format!("`{name}` has rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dimension overflow")?;
        let raw = r.take(n.checked_mul(8).ok_or("dimension overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
        out.push((name.to_string(), t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes).map_err(|m| ckpt_err(path, m))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn params_of(records: Vec<(String, Tensor)>, path: &Path) -> Result<ParameterSet> {
    let mut ps = ParameterSet::new();
    for (name, t) in records {
        ps.add(&name, t).map_err(|e| ckpt_err(path, e.to_string()))?;
    }
    Ok(ps)
}

/// Writes the parameters and the sidecar.
pub fn save_model(model: &Model, path: impl AsRef<Path>, epoch: usize, train: Option<&TrainConfig>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensors(model.params().iter().map(|(_, n, t)| (n, t)));
    write_atomic(path, &bytes)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        epoch,
        train: train.cloned(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let side = sidecar_path(path.as_ref());
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ckpt_err(&side, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(&side, format!("unsupported format version {}", meta.format_version)));
    }
    Ok(meta)
}

/// Rebuilds the model described by the sidecar and loads its parameters,
/// rejecting any name or shape mismatch.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let meta = load_meta(path)?;
    let mut model = Model::new(meta.model.clone(), 0).map_err(|e| ckpt_err(path, e.to_string()))?;
    let loaded = params_of(read_tensors(path)?, path)?;
    model.params_mut().assign(&loaded).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((model, meta))
}

pub fn save_adam(state: &AdamState, params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let step = Tensor::scalar(state.step as f64);
    let names: Vec<(String, String)> =
        params.iter().map(|(_, n, _)| (format!("m/{n}"), format!("v/{n}"))).collect();
    let mut records: Vec<(&str, &Tensor)> = vec![("step", &step)];
    for (i, (m, v)) in names.iter().enumerate() {
        records.push((m, &state.m[i]));
        records.push((v, &state.v[i]));
    }
    write_atomic(path.as_ref(), &encode_tensors(records))
}

pub fn load_adam(params: &ParameterSet, path: impl AsRef<Path>) -> Result<AdamState> {
    let path = path.as_ref();
    let records = read_tensors(path)?;
    let mut state = AdamState::new(params);
    let expected = 1 + 2 * params.len();
    if records.len() != expected {
        return Err(ckpt_err(path, format!("expected {expected} records, found {}", records.len())));
    }
    let mut it = records.into_iter();
    let (name, step) = it.next().expect("counted");
    if name != "step" || step.len() != 1 {
        return Err(ckpt_err(path, "first record must be the scalar `step`"));
    }
    state.step = step.data()[0] as u64;
    for (i, (_, n, p)) in params.iter().enumerate() {
        for (slot, prefix) in [(&mut state.m[i], "m/"), (&mut state.v[i], "v/")] {
            let (name, t) = it.next().expect("counted");
            if name != format!("{prefix}{n}") || t.shape() != p.shape() {
                return Err(ckpt_err(path, format!("record `{name}` {:?} does not match `{prefix}{n}` {:?}", t.shape(), p.shape())));
            }
            *slot = t;
        }
    }
    Ok(state)
}
