//! Binary checkpoints: a JSON header with the model config, then named
//! parameters as little-endian `f32`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kptr::KptrModel;
use crate::num::Real;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"KPCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Free-form run information (epoch, step, seed, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&u32::try_from(v).expect("fits in u32").to_le_bytes())
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &KptrModel<T>, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config.clone(),
        meta,
    })?;
    let io = |e| Error::io(path, e);
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        put_u32(&mut w, header.len()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        put_u32(&mut w, model.store.len()).map_err(io)?;
        for (_, p) in model.store.iter() {
            put_u32(&mut w, p.name.len()).map_err(io)?;
            w.write_all(p.name.as_bytes()).map_err(io)?;
            put_u32(&mut w, p.value.nrows()).map_err(io)?;
            put_u32(&mut w, p.value.ncols()).map_err(io)?;
            for v in p.value.iter() {
                let x = v.to_f32().unwrap_or(f32::NAN);
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let out = self.data.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::shape(
                format!("{}: {what}", self.path.display()),
                format!("{n} more bytes"),
                format!("{}", self.data.len().saturating_sub(self.pos)),
            )
        })?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    load_raw(path.as_ref()).map(|(h, _)| h)
}

fn load_raw(path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::shape(
            format!("{}: file signature", path.display()),
            String::from_utf8_lossy(MAGIC),
            "something else",
        ));
    }
    let n = r.u32("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(n, "header")?)?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::shape(format!("{}: parameter name", path.display()), "UTF-8", "invalid bytes"))?;
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let bytes = r.take(rows * cols * 4, &name)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(name, Array2::from_shape_vec((rows, cols), values).expect("sized above"));
    }
    if r.pos != data.len() {
        return Err(Error::shape(
            format!("{}: trailing data", path.display()),
            data.len().to_string(),
            r.pos.to_string(),
        ));
    }
    Ok((header, store))
}

/// Loads a checkpoint, verifying every parameter against the recorded
/// model config.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(KptrModel<T>, CheckpointHeader)> {
    let (header, store) = load_raw(path.as_ref())?;
    let model = KptrModel::from_store(header.model.clone(), store.cast())?;
    Ok((model, header))
}
