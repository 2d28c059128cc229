//! Checkpoint persistence.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CRACKNEX"
//! version      u32
//! config_len   u32      followed by that many bytes of config JSON
//! iteration    u64
//! param_count  u32
//! per param:   name_len u16, name bytes, ndim u8, dims u64 each, f32 data
//! vel_count    u32      momentum buffers, same encoding without names
//! per buffer:  ndim u8, dims u64 each, f32 data
//! ```
//!
//! Parameters round-trip bit-exactly: f32 values are written as raw bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::engine::{ModelParams, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const MAGIC: &[u8; 8] = b"CRACKNEX";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters plus everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub iteration: u64,
    pub params: ModelParams<f32>,
    /// Momentum buffers aligned with the parameter visiting order.
    pub velocity: Vec<ArrayD<f32>>,
}

fn write_array(w: &mut impl Write, arr: &ArrayD<f32>) -> std::io::Result<()> {
    w.write_u8(arr.ndim() as u8)?;
    for &d in arr.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in arr.iter() {
        w.write_u32::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read) -> std::io::Result<ArrayD<f32>> {
    let ndim = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f32::from_bits(r.read_u32::<LittleEndian>()?));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("stored shape is consistent"))
}

/// Serialize a checkpoint to disk.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(checkpoint.format_version)
        .map_err(io_err)?;
    let config_json = serde_json::to_vec(&checkpoint.config)?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)
        .map_err(io_err)?;
    w.write_all(&config_json).map_err(io_err)?;
    w.write_u64::<LittleEndian>(checkpoint.iteration)
        .map_err(io_err)?;

    let mut entries: Vec<(String, ArrayD<f32>)> = Vec::new();
    checkpoint
        .params
        .for_each(&mut |name, arr| entries.push((name.to_string(), arr.clone())));
    w.write_u32::<LittleEndian>(entries.len() as u32)
        .map_err(io_err)?;
    for (name, arr) in &entries {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)
            .map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        write_array(&mut w, arr).map_err(io_err)?;
    }

    w.write_u32::<LittleEndian>(checkpoint.velocity.len() as u32)
        .map_err(io_err)?;
    for arr in &checkpoint.velocity {
        write_array(&mut w, arr).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Load and validate a checkpoint. The parameter structure is rebuilt from
/// the stored configuration, then every stored entry must match it by name
/// and shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: corrupt or truncated ({what})", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version} unsupported (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let config_len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("config length"))? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)
        .map_err(|_| corrupt("config"))?;
    let config: TrainConfig = serde_json::from_slice(&config_json)?;
    let iteration = r
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("iteration"))?;

    let param_count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("param count"))? as usize;
    let mut stored: Vec<(String, ArrayD<f32>)> = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = r
            .read_u16::<LittleEndian>()
            .map_err(|_| corrupt("param name length"))? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| corrupt("param name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| corrupt("param name encoding"))?;
        let arr = read_array(&mut r).map_err(|_| corrupt("param data"))?;
        stored.push((name, arr));
    }

    let mut params = ModelParams::<f32>::init(&config);
    let mut cursor = 0usize;
    let mut mismatch: Option<String> = None;
    params.for_each_mut(&mut |name, arr| {
        if mismatch.is_some() {
            return;
        }
        match stored.get(cursor) {
            Some((stored_name, stored_arr))
                if stored_name == name && stored_arr.shape() == arr.shape() =>
            {
                *arr = stored_arr.clone();
            }
            Some((stored_name, _)) => {
                mismatch = Some(format!(
                    "parameter {cursor}: expected \"{name}\", found \"{stored_name}\""
                ));
            }
            None => mismatch = Some(format!("missing parameter \"{name}\"")),
        }
        cursor += 1;
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(format!("{}: {m}", path.display())));
    }
    if cursor != stored.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} extra parameter entries",
            path.display(),
            stored.len() - cursor
        )));
    }

    let vel_count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("velocity count"))? as usize;
    if vel_count != cursor {
        return Err(Error::Checkpoint(format!(
            "{}: momentum table has {vel_count} entries, expected {cursor}",
            path.display()
        )));
    }
    let mut velocity = Vec::with_capacity(vel_count);
    for _ in 0..vel_count {
        velocity.push(read_array(&mut r).map_err(|_| corrupt("velocity data"))?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }

    Ok(Checkpoint {
        format_version: version,
        config,
        iteration,
        params,
        velocity,
    })
}
