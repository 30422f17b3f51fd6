//! Binary matrix files and the versioned checkpoint container.
//!
//! Matrix layout (little-endian throughout):
//!
//! ```text
//! magic   4 bytes   b"MEL1" (f32 body) or b"MAT8" (f64 body)
//! rows    u32
//! cols    u32
//! body    rows*cols floats, row-major
//! ```
//!
//! Mel spectrograms and exported embeddings use the f32 variant; checkpoint
//! parameter tensors use the f64 variant so a save/load round trip is
//! bit-exact.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic      4 bytes   b"CKP1"
//! version    u32       currently 1; loaders reject anything else
//! cfg_len    u32       followed by cfg_len bytes of config JSON
//! n_tensors  u32
//! repeated:  name_len u32, name bytes, then one MAT8 matrix record
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC_F32: &[u8; 4] = b"MEL1";
const MAGIC_F64: &[u8; 4] = b"MAT8";
const MAGIC_CKPT: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_header(w: &mut impl Write, magic: &[u8; 4], rows: usize, cols: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    Ok(())
}

fn write_matrix_into(w: &mut impl Write, m: &Array2<f64>, as_f32: bool) -> Result<()> {
    let magic = if as_f32 { MAGIC_F32 } else { MAGIC_F64 };
    write_header(w, magic, m.nrows(), m.ncols())?;
    for &v in m.iter() {
        if as_f32 {
            w.write_all(&(v as f32).to_le_bytes())?;
        } else {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_matrix_from(r: &mut impl Read) -> Result<Array2<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let is_f32 = match &magic {
        m if m == MAGIC_F32 => true,
        m if m == MAGIC_F64 => false,
        other => {
            return Err(Error::format(format!(
                "unknown matrix magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("matrix dimensions overflow"))?;
    let mut data = Vec::with_capacity(n);
    if is_f32 {
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
    } else {
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format(format!("matrix shape: {e}")))
}

/// Writes a matrix with an f32 body (the mel/export layout).
pub fn write_matrix_f32(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_into(&mut w, m, true)?;
    w.flush()?;
    Ok(())
}

/// Writes a matrix with an f64 body (the checkpoint layout).
pub fn write_matrix_f64(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_into(&mut w, m, false)?;
    w.flush()?;
    Ok(())
}

/// Reads either matrix variant, dispatching on the magic bytes.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    read_matrix_from(&mut r)
}

/// A loaded checkpoint: config record plus named parameter tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    config_json: &str,
    tensors: &[(String, Array2<f64>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_CKPT)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = config_json.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        write_matrix_into(&mut w, tensor, false)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC_CKPT {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config_json =
        String::from_utf8(cfg).map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let tensor = read_matrix_from(&mut r)?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint {
        version,
        config_json,
        tensors,
    })
}
