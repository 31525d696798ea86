//! Binary checkpoint: `FLCX`, u32 version, u64-prefixed config text, u32
//! tensor count, then `{u16 name len, name, u8 rank, u64 dims, u8 dtype,
//! payload}` records. All integers and payloads are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use falconx_core::{FalconX, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLCX";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

pub fn encode(model: &FalconX, config: &RunConfig) -> Vec<u8> {
    let text = config.render();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &FalconX, config: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, encode(model, config)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(self.fail(format!(
                "truncated {what}: expected {n} bytes, found {left} (file length {})",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice length checked"))
    }
}

/// Header contents and raw tensors as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub version: u32,
    pub config: RunConfig,
    pub config_text: String,
    /// `(name, shape, dtype, values widened to f64)`.
    pub tensors: Vec<(String, Vec<usize>, u8, Vec<f64>)>,
}

fn decode_header<'a>(c: &mut Cursor<'a>) -> Result<(u32, RunConfig, String)> {
    if c.array::<4>("magic")? != *MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic bytes"));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != VERSION {
        c.pos -= 4;
        return Err(c.fail(format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = u64::from_le_bytes(c.array("config length")?);
    let at = c.pos;
    let raw = c.take(len as usize, "config text")?;
    let text = std::str::from_utf8(raw).map_err(|_| Error::Checkpoint {
        path: c.path.to_path_buf(),
        offset: at as u64,
        message: "config text is not UTF-8".into(),
    })?;
    let config = RunConfig::parse(text).map_err(|e| Error::Checkpoint {
        path: c.path.to_path_buf(),
        offset: at as u64,
        message: format!("invalid config: {e}"),
    })?;
    Ok((version, config, text.to_string()))
}

fn decode_tensors(c: &mut Cursor<'_>) -> Result<Vec<(String, Vec<usize>, u8, Vec<f64>)>> {
    let count = u32::from_le_bytes(c.array("tensor count")?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.array("name length")?) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint {
                path: c.path.to_path_buf(),
                offset: at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.array::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(c.array("dimension")?) as usize);
        }
        let dtype = c.array::<1>("dtype")?[0];
        let n: usize = shape.iter().product();
        let values = match dtype {
            DTYPE_F64 => c
                .take(n * 8, &format!("payload of {name}"))?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect(),
            DTYPE_F32 => c
                .take(n * 4, &format!("payload of {name}"))?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
                .collect(),
            other => {
                c.pos -= 1;
                return Err(c.fail(format!("unknown dtype code {other} for {name}")));
            }
        };
        out.push((name, shape, dtype, values));
    }
    if c.pos != c.bytes.len() {
        return Err(c.fail(format!("{} trailing bytes", c.bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let mut c = Cursor { bytes, pos: 0, path };
    let (version, config, config_text) = decode_header(&mut c)?;
    let tensors = decode_tensors(&mut c)?;
    Ok(Decoded {
        version,
        config,
        config_text,
        tensors,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model stored at `path`. When `expected` is given, its model
/// section must match the stored one; this is checked before any tensor is
/// read.
pub fn load_checkpoint(path: &Path, expected: Option<&RunConfig>) -> Result<(FalconX, RunConfig)> {
    let bytes = read(path)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let (_, config, _) = decode_header(&mut c)?;
    if let Some(want) = expected {
        if want.model != config.model {
            let stored = config.entries();
            let diffs: Vec<String> = want
                .entries()
                .into_iter()
                .filter(|(k, v)| stored.get(k) != Some(v) && is_model_key(k))
                .map(|(k, v)| format!("{k}: expected {v}, stored {}", stored[k]))
                .collect();
            return Err(c.fail(format!("model config mismatch ({})", diffs.join(", "))));
        }
    }
    let mut model = FalconX::new(config.model.clone(), 0)?;
    let table_start = c.pos as u64;
    let tensors = decode_tensors(&mut c)?;
    let fail = |message: String| Error::Checkpoint {
        path: PathBuf::from(path),
        offset: table_start,
        message,
    };
    let mut by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = BTreeMap::new();
    for (name, shape, _, values) in &tensors {
        if by_name.insert(name, (shape, values)).is_some() {
            return Err(fail(format!("duplicate tensor {name:?}")));
        }
    }
    let known: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    if let Some(extra) = by_name.keys().find(|n| !known.iter().any(|k| k == *n)) {
        return Err(fail(format!("unknown tensor {extra:?}")));
    }
    for p in model.store.iter_mut() {
        let (shape, values) = by_name
            .get(p.name.as_str())
            .ok_or_else(|| fail(format!("missing tensor {:?}", p.name)))?;
        if shape.as_slice() != p.value.shape() {
            return Err(fail(format!(
                "tensor {:?} has shape {shape:?}, config implies {:?}",
                p.name,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(shape.to_vec(), values.to_vec())?;
    }
    Ok((model, config))
}

fn is_model_key(k: &str) -> bool {
    matches!(
        k,
        "d_model"
            | "patch_len"
            | "time_layers"
            | "lea_layers"
            | "heads"
            | "prototypes"
            | "alpha"
            | "lambda_init"
            | "feed_forward"
            | "norm_mode"
            | "quantiles"
    )
}

/// Human-readable summary used by `inspect`.
pub fn summarize(path: &Path) -> Result<String> {
    let d = decode(&read(path)?, path)?;
    let mut s = format!("version {}\n", d.version);
    s.push_str(&d.config_text);
    let total: usize = d.tensors.iter().map(|t| t.3.len()).sum();
    s.push_str(&format!("tensors {} scalars {total}\n", d.tensors.len()));
    for (name, shape, dtype, values) in &d.tensors {
        let ty = if *dtype == DTYPE_F64 { "f64" } else { "f32" };
        let rms = (values.iter().map(|x| x * x).sum::<f64>() / values.len().max(1) as f64).sqrt();
        s.push_str(&format!("{name} {shape:?} {ty} rms={rms:.6}\n"));
    }
    Ok(s)
}
