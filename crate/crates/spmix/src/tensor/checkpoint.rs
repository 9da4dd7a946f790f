//! Flat binary parameter checkpoints.
//!
//! Layout: magic `SPMX`, version `u32` LE, then one record per tensor:
//! name length (`u32` LE), UTF-8 name bytes, rank (`u32` LE), dims
//! (`u64` LE each), raw little-endian `f64` data. Records run to EOF.

use super::Tensor;
use crate::error::{Result, SpmixError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPMX";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| SpmixError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SpmixError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| SpmixError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| SpmixError::io(path, e))?;
    if &magic != MAGIC {
        return Err(SpmixError::Format {
            path: path.to_path_buf(),
            message: format!("bad magic {magic:?}, expected SPMX"),
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(SpmixError::Format {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf).map_err(|e| SpmixError::io(path, e))? {
            0 => break,
            4 => {}
            n => {
                // a partial length prefix means a truncated file
                let mut rest = [0u8; 4];
                r.read_exact(&mut rest[..4 - n])
                    .map_err(|e| SpmixError::io(path, e))?;
                len_buf[n..].copy_from_slice(&rest[..4 - n]);
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| SpmixError::io(path, e))?;
        let name = String::from_utf8(name_bytes).map_err(|_| SpmixError::Format {
            path: path.to_path_buf(),
            message: "tensor name is not valid UTF-8".into(),
        })?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| SpmixError::io(path, e))?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(|e| SpmixError::io(path, e))?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| SpmixError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
