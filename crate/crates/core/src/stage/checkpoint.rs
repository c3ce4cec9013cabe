//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"KSEM"            magic
//! u32                format version (1)
//! u32                number of arrays
//! per array, in ParamSet visiting order:
//!   u32 rows, u32 cols, rows·cols × f64
//! ```
//!
//! The visiting order is extract conv (kernel, bias), then for each stage
//! each layer (norm1 scale/shift, w_qry, w_key, w_val, out_proj, norm2
//! scale/shift, ffn w1/b1/w2/b2) followed by the stage conv, and finally the
//! reconstruction conv. Architecture is not stored: loading fills a template
//! of matching shape.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"KSEM";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint<P: ParamSet, W: Write>(params: &P, mut out: W) -> Result<()> {
    let arrays = params.named();
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&(arrays.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (_, m) in arrays {
        out.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io_err)?;
        for v in m.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

/// Overwrites every array of `template` with the checkpoint contents,
/// checking count and shapes.
pub fn read_checkpoint_into<P: ParamSet, R: Read>(template: &mut P, mut input: R) -> Result<()> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let expected = template.named().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} arrays stored, model has {expected}")));
    }
    let mut failure = None;
    let mut index = 0;
    template.visit_mut(&mut |m| {
        if failure.is_some() {
            return;
        }
        let res = (|| {
            let rows = read_u32(&mut input)? as usize;
            let cols = read_u32(&mut input)? as usize;
            if (rows, cols) != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {index}: stored {rows}x{cols}, expected {:?}",
                    m.shape()
                )));
            }
            let mut b = [0u8; 8];
            for v in m.data_mut() {
                input.read_exact(&mut b).map_err(io_err)?;
                *v = f64::from_le_bytes(b);
            }
            Ok(())
        })();
        if let Err(e) = res {
            failure = Some(e);
        }
        index += 1;
    });
    failure.map_or(Ok(()), Err)
}
