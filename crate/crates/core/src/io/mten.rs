use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTEN";
const VERSION: u8 = 1;

fn format_err(e: std::io::Error) -> Error {
    Error::Format(format!("MTEN: {e}"))
}

/// Writes `t` as little-endian `f32` (values are rounded for `f64` tensors).
pub fn write_mten<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("MTEN: rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(rank);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("MTEN: extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(format_err)
}

pub fn read_mten<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(format_err)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("MTEN: bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("MTEN: unsupported version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(format_err)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format("MTEN: size overflow".into()))?;
    let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("MTEN: size overflow".into()))?];
    r.read_exact(&mut raw).map_err(format_err)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(&dims, data).map_err(|e| Error::Format(format!("MTEN: {e}")))
}

pub fn save_mten<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = super::create(path)?;
    write_mten(&mut w, t)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mten(path: &Path) -> Result<Tensor<f32>> {
    let mut r = super::open(path)?;
    let t = read_mten(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Format(format!("{}: trailing bytes after MTEN tensor", path.display()))),
        Err(e) => Err(Error::io(path, e)),
    }
}
