//! SGT1 tensor files and the SGB1 bundle that groups named tensors with a
//! JSON header.
//!
//! SGT1: `b"SGT1"`, u32 rank, `rank` u64 dims, then `numel` f64 values, all
//! little-endian. SGB1: `b"SGB1"`, u32 header length, UTF-8 JSON header,
//! u32 tensor count, then for each tensor a u32 name length, the name and an
//! embedded SGT1 record.

use std::io::{Read, Write};

use segcap_core::Tensor;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SGT1";
pub const BUNDLE_MAGIC: &[u8; 4] = b"SGB1";

// Guards against allocating absurd buffers from a corrupt header.
const MAX_RANK: usize = 8;
const MAX_NUMEL: usize = 1 << 28;
const MAX_NAME: usize = 4096;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("dimension overflow".into()))?;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_NUMEL)
            .ok_or_else(|| Error::Format("tensor too large".into()))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Named tensors plus a free-form JSON header.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_bundle<W: Write>(w: &mut W, b: &Bundle) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    let header = serde_json::to_vec(&b.header)?;
    w.write_all(&len_u32(header.len())?.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&len_u32(b.tensors.len())?.to_le_bytes())?;
    for (name, t) in &b.tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<Bundle> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!("bad bundle magic {magic:?}")));
    }
    let hlen = read_u32(r)? as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        if n > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {n} too large")));
        }
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
        tensors.push((name, read_tensor(r)?));
    }
    Ok(Bundle { header, tensors })
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
