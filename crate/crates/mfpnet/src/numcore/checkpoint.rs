//! Binary checkpoint format for parameter sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   5 bytes   "MFPN1"
//! count   u32       number of parameters
//! repeat count times:
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   rank      u32
//!   dims      rank x u64
//!   data      product(dims) x f64 (IEEE-754 bit pattern, little-endian)
//! ```
//!
//! Values round-trip bit for bit; loading restores parameters in file
//! order with zeroed gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::params::ParamSet;
use crate::numcore::tensor::Tensor;

const MAGIC: &[u8; 5] = b"MFPN1";
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

/// Writes `set` to `path` in checkpoint format.
pub fn save(set: &ParamSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    let count = u32::try_from(set.len())
        .map_err(|_| Error::Config(format!("{} parameters do not fit a checkpoint", set.len())))?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for p in set.iter() {
        let name = p.name.as_bytes();
        if name.len() as u64 > MAX_NAME as u64 {
            return Err(Error::Config(format!("parameter name {:?} too long", p.name)));
        }
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint back into a fresh parameter set.
pub fn load(path: &Path) -> Result<ParamSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a checkpoint: bad magic"));
    }
    let count = read_u32(&mut r, path, "parameter count")?;
    let mut set = ParamSet::new();
    for i in 0..count {
        let ctx = format!("parameter {i}");
        let name_len = read_u32(&mut r, path, &ctx)?;
        if name_len > MAX_NAME {
            return Err(Error::parse(path, format!("{ctx}: name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name, path, &ctx)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::parse(path, format!("{ctx}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, path, &ctx)?;
        if rank > MAX_RANK {
            return Err(Error::parse(path, format!("{ctx}: rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut len: u64 = 1;
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path, &ctx)?;
            let d = u64::from_le_bytes(buf);
            len = len
                .checked_mul(d)
                .filter(|&v| v <= MAX_ELEMENTS)
                .ok_or_else(|| Error::parse(path, format!("{ctx}: element count too large")))?;
            dims.push(d as usize);
        }
        let mut data = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path, &ctx)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&dims, data)?;
        set.add(&name, tensor)
            .map_err(|_| Error::parse(path, format!("{ctx}: duplicate name {name:?}")))?;
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(set),
        Ok(_) => Err(Error::parse(path, "trailing bytes after last parameter")),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(path, format!("truncated while reading {what}"))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}
