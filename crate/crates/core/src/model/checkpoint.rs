//! Checkpoint file format.
//!
//! ```text
//! item-v1
//! {"layers":4,...}            model config as one JSON line
//! <n_tensors>
//! <name> <ndim> <d0> <d1> ... one header line per tensor
//! <raw little-endian f32 data for each tensor, in header order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::{Param, ParamStore};
use super::{Model, ModelConfig};
use crate::tensor::Real;
use crate::{Error, Result};

const MAGIC: &str = "item-v1";

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let config = serde_json::to_string(&model.config).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let _ = writeln!(out, "{MAGIC}\n{config}\n{}", model.params.len());
    for p in model.params.iter() {
        let dims: Vec<String> = p.shape.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{} {} {}", p.name, p.shape.len(), dims.join(" "));
    }
    for p in model.params.iter() {
        for &v in &p.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let tmp = crate::partial_path(path);
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint", "unexpected end of header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("checkpoint", "header is not UTF-8"))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = next_line(&bytes, &mut pos)?;
    if magic != MAGIC {
        return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
    }
    let config: ModelConfig = serde_json::from_str(next_line(&bytes, &mut pos)?)
        .map_err(|e| Error::format("checkpoint", format!("config: {e}")))?;
    let n: usize = next_line(&bytes, &mut pos)?
        .trim()
        .parse()
        .map_err(|_| Error::format("checkpoint", "bad tensor count"))?;
    let mut headers = Vec::with_capacity(n);
    for _ in 0..n {
        let line = next_line(&bytes, &mut pos)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::format("checkpoint", "empty tensor header"))?
            .to_string();
        let nums: Vec<usize> = parts
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Error::format("checkpoint", format!("bad shape for {name}")))?;
        match nums.split_first() {
            Some((&ndim, dims)) if ndim == dims.len() => headers.push((name, dims.to_vec())),
            _ => return Err(Error::format("checkpoint", format!("bad shape for {name}"))),
        }
    }
    let mut store = ParamStore::new();
    let mut params = Vec::with_capacity(n);
    for (name, shape) in headers {
        let count: usize = shape.iter().product();
        let end = pos + 4 * count;
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| Error::format("checkpoint", format!("truncated data for {name}")))?;
        pos = end;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(Param {
            name,
            shape,
            data,
            decay: false,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes after tensor data"));
    }
    for p in params {
        store.push(p);
    }
    Model::from_params(config, store)
}
