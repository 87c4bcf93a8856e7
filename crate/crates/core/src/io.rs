//! Raw tensor files (`EQT1`) and model checkpoints.
//!
//! `EQT1` layout: the magic bytes `EQT1`, a little-endian `u32` rank, one
//! little-endian `u32` per dimension, then the values as little-endian `f64`
//! in row-major order.
//!
//! A checkpoint is a UTF-8 header of `key=value` lines ending with an empty
//! line, followed by one `EQT1` block per parameter in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::reconstruct::{ModelSpec, ReconstructionModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"EQT1";
pub const CHECKPOINT_MAGIC: &str = "EQCK1";

/// Serializes a tensor (values widened to `f64`).
pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

/// Parses one tensor from the front of `bytes`; returns it and the bytes used.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let need = |at: usize, len: usize, what: &str| -> Result<()> {
        if bytes.len() < at + len {
            return Err(Error::Format(format!(
                "truncated {what} at byte offset {at}: expected {len} bytes, found {}",
                bytes.len().saturating_sub(at)
            )));
        }
        Ok(())
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic at byte offset 0: expected \"EQT1\", found {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    need(4, 4, "rank")?;
    let rank = u32_at(4);
    need(8, 4 * rank, "shape")?;
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        Error::Format(format!("shape {shape:?} at byte offset 8 overflows"))
    })?;
    let start = 8 + 4 * rank;
    need(start, 8 * count, "payload")?;
    let data = (0..count)
        .map(|i| {
            let at = start + 8 * i;
            T::lit(f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")))
        })
        .collect();
    Ok((Tensor::new(shape, data)?, start + 8 * count))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let (t, used) = tensor_from_bytes(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor at byte offset {used}",
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Serializes a model: kind, spec, seed, grid and parameters.
pub fn checkpoint_to_bytes<T: Scalar>(model: &ReconstructionModel<T>) -> Vec<u8> {
    let spec = model.spec().to_string();
    let kind = spec.split(';').next().unwrap_or_default().trim_start_matches("kind=");
    let (h, w) = model.grid();
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nkind={kind}\nspec={spec}\nseed={}\ngrid={h}x{w}\nparams={}\n",
        model.seed(),
        model.params().len()
    );
    for name in model.param_names() {
        header.push_str(&format!("param={name}\n"));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    for p in model.params() {
        out.extend(tensor_to_bytes(p));
    }
    out
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ReconstructionModel<T>> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("checkpoint header is not terminated by an empty line".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|e| Error::Format(format!("checkpoint header is not UTF-8 at byte offset {}", e.valid_up_to())))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Format(format!("missing {CHECKPOINT_MAGIC} magic at byte offset 0")));
    }
    let mut spec = None;
    let mut seed = None;
    let mut grid = None;
    let mut names = Vec::new();
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed checkpoint header line `{line}`")))?;
        match k {
            "spec" => spec = Some(ModelSpec::parse(v)?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| Error::Format(format!("bad seed `{v}`")))?),
            "grid" => {
                let (h, w) = v.split_once('x').ok_or_else(|| Error::Format(format!("bad grid `{v}`")))?;
                let p = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad grid `{v}`")));
                grid = Some((p(h)?, p(w)?));
            }
            "param" => names.push(v.to_string()),
            _ => {}
        }
    }
    let missing = |k: &str| Error::Format(format!("checkpoint header lacks `{k}`"));
    let (h, w) = grid.ok_or_else(|| missing("grid"))?;
    let mut model = ReconstructionModel::new(spec.ok_or_else(|| missing("spec"))?, h, w, seed.ok_or_else(|| missing("seed"))?)?;
    if names != model.param_names() {
        return Err(Error::Format("checkpoint parameter names do not match the model spec".into()));
    }
    let mut at = end + 2;
    let mut params = Vec::with_capacity(names.len());
    for _ in &names {
        let (t, used) = tensor_from_bytes(&bytes[at..]).map_err(|e| Error::Format(format!("parameter block at byte offset {at}: {e}")))?;
        params.push(t);
        at += used;
    }
    if at != bytes.len() {
        return Err(Error::Format(format!("trailing bytes after the last parameter at byte offset {at}")));
    }
    model.set_params(params)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &ReconstructionModel<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ReconstructionModel<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
