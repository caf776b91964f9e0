//! Versioned binary checkpoints.
//!
//! Layout: magic, format version, a JSON metadata block (model config,
//! optimizer kind, step), a fixed-order run of self-describing tensor records
//! (name, dtype, shape, little-endian payload), and a trailing SHA-256 over
//! everything before it. The writer is canonical, so save -> load -> save is
//! byte-identical.

use crate::model::{param_shapes, LayerParams, ModelConfig, Params};
use crate::optimizer::{OptState, ParamSlot, SecondMoment};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FCMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    VersionMismatch(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("checksum mismatch: checkpoint is corrupt")]
    ChecksumMismatch,
    #[error("bad metadata block: {0}")]
    BadMeta(String),
    #[error("tensor {name}: expected shape {expected:?}, found {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor {expected} missing or out of order (found {got})")]
    TensorOrder { expected: String, got: String },
    #[error("unsupported dtype {0} for tensor {1}")]
    BadDtype(u8, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Adafactor,
    SgdMomentum,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    optimizer: OptKind,
    step: u64,
}

/// Every tensor in the file, in write order: params first, then per-parameter
/// optimizer state (momentum, then the factored or full second moment).
fn tensor_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let params = param_shapes(cfg);
    let mut out = params.clone();
    for (name, shape) in &params {
        out.push((format!("opt.{name}.m"), shape.clone()));
        if shape.len() >= 2 {
            let rows: usize = shape[..shape.len() - 1].iter().product();
            let cols = shape[shape.len() - 1];
            out.push((format!("opt.{name}.vr"), vec![rows]));
            out.push((format!("opt.{name}.vc"), vec![cols]));
        } else {
            out.push((format!("opt.{name}.v"), shape.clone()));
        }
    }
    out
}

fn opt_state_tensors(state: &OptState) -> Vec<&Vec<f32>> {
    let mut out = Vec::new();
    for slot in &state.slots {
        out.push(&slot.momentum);
        match &slot.second {
            SecondMoment::Factored { row, col } => {
                out.push(row);
                out.push(col);
            }
            SecondMoment::Full { v } => out.push(v),
        }
    }
    out
}

pub fn save_checkpoint(
    params: &Params,
    opt_state: &OptState,
    cfg: &ModelConfig,
    opt_kind: OptKind,
    step: u64,
    path: &Path,
) -> Result<(), CkptError> {
    let meta = Meta { model: cfg.clone(), optimizer: opt_kind, step };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let manifest = tensor_manifest(cfg);
    let mut tensors: Vec<&Vec<f32>> = params.tensors();
    tensors.extend(opt_state_tensors(opt_state));
    assert_eq!(tensors.len(), manifest.len());

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for ((name, shape), data) in manifest.iter().zip(tensors) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "manifest shape for {name}");
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkptError> {
        if self.pos + n > self.buf.len() {
            return Err(CkptError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CkptError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, OptState, ModelConfig, OptKind, u64), CkptError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CkptError::Truncated);
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if !bytes.starts_with(MAGIC) {
        return Err(CkptError::BadMagic);
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(CkptError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CkptError::VersionMismatch(version));
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CkptError::BadMeta(e.to_string()))?;
    meta.model.validate().map_err(|e| CkptError::BadMeta(e.to_string()))?;

    let manifest = tensor_manifest(&meta.model);
    let count = r.u32()? as usize;
    if count != manifest.len() {
        return Err(CkptError::BadMeta(format!(
            "{count} tensors in file, config implies {}",
            manifest.len()
        )));
    }
    let mut flats: Vec<Vec<f32>> = Vec::with_capacity(count);
    for (expected_name, expected_shape) in &manifest {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CkptError::BadMeta(e.to_string()))?;
        if &name != expected_name {
            return Err(CkptError::TensorOrder { expected: expected_name.clone(), got: name });
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CkptError::BadDtype(dtype, name));
        }
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if &shape != expected_shape {
            return Err(CkptError::ShapeMismatch {
                name,
                expected: expected_shape.clone(),
                got: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        flats.push(data);
    }
    if r.pos != body.len() {
        return Err(CkptError::BadMeta("trailing bytes after tensor records".into()));
    }

    let n_params = param_shapes(&meta.model).len();
    let opt_flats = flats.split_off(n_params);
    let params = params_from_flats(flats);
    let opt_state = opt_state_from_flats(&meta.model, meta.step, opt_flats);
    Ok((params, opt_state, meta.model, meta.optimizer, meta.step))
}

fn params_from_flats(mut flats: Vec<Vec<f32>>) -> Params {
    let final_norm_gain = flats.pop().unwrap();
    let token_embedding = flats.remove(0);
    let layers = flats
        .chunks_exact_mut(8)
        .map(|c| LayerParams {
            norm_gain: std::mem::take(&mut c[0]),
            wq: std::mem::take(&mut c[1]),
            wk: std::mem::take(&mut c[2]),
            wv: std::mem::take(&mut c[3]),
            wo: std::mem::take(&mut c[4]),
            w_gate: std::mem::take(&mut c[5]),
            w_up: std::mem::take(&mut c[6]),
            w_down: std::mem::take(&mut c[7]),
        })
        .collect();
    Params { token_embedding, layers, final_norm_gain }
}

fn opt_state_from_flats(cfg: &ModelConfig, step: u64, flats: Vec<Vec<f32>>) -> OptState {
    let shapes = param_shapes(cfg);
    let mut it = flats.into_iter();
    let slots = shapes
        .iter()
        .map(|(_, shape)| {
            let momentum = it.next().unwrap();
            let second = if shape.len() >= 2 {
                SecondMoment::Factored { row: it.next().unwrap(), col: it.next().unwrap() }
            } else {
                SecondMoment::Full { v: it.next().unwrap() }
            };
            ParamSlot { momentum, second }
        })
        .collect();
    OptState { step, slots }
}
