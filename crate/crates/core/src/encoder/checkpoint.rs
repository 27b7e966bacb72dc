//! Versioned binary checkpoint: config header, then every tensor with its
//! name, kind, trainable flag and shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::params::{ModelConfig, ModelParams, ParamKind, TrainMode};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SQRCKPT\0";
const VERSION: u32 = 1;

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Base => 0,
        ParamKind::Adapter => 1,
        ParamKind::Head => 2,
        ParamKind::ImageProj => 3,
    }
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u32::<LittleEndian>(params.tensors.len() as u32)?;
    for p in &params.tensors {
        w.write_u16::<LittleEndian>(p.name.len() as u16)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u8(kind_code(p.kind))?;
        w.write_u8(p.trainable as u8)?;
        let (r, c) = p.value.dim();
        w.write_u32::<LittleEndian>(r as u32)?;
        w.write_u32::<LittleEndian>(c as u32)?;
        for v in p.value.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, what: &str) -> Result<ModelParams> {
    let bad = |reason: String| Error::format(what, reason);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    let mut params = ModelParams::init(&config, 0, TrainMode::Adapters)?;
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n != params.tensors.len() {
        return Err(bad(format!("expected {} tensors, found {n}", params.tensors.len())));
    }
    for p in &mut params.tensors {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        if name != p.name.as_bytes() {
            return Err(bad(format!(
                "tensor `{}` where `{}` was expected",
                String::from_utf8_lossy(&name),
                p.name
            )));
        }
        let kind = r.read_u8()?;
        if kind != kind_code(p.kind) {
            return Err(bad(format!("tensor `{}` has wrong kind", p.name)));
        }
        p.trainable = r.read_u8()? != 0;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        if (rows, cols) != p.value.dim() {
            return Err(bad(format!(
                "tensor `{}` has shape {rows}x{cols}, expected {:?}",
                p.name,
                p.value.dim()
            )));
        }
        let mut data = vec![0f64; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        p.value = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), &path.display().to_string())
}
