//! "NTF v1" named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NTF1"  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u64 dim, u8 dtype, payload }
//! ```
//!
//! dtype `0` is `f64`; the payload is `Π dims` little-endian `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTF1";
pub const DTYPE_F64: u8 = 0;

pub fn write<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?.to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F64])?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
    Ok(b)
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "entry count")?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("name is not UTF-8: {e}")))?;
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "dim")?) as usize);
        }
        let [dtype] = read_exact::<_, 1>(&mut r, "dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("{name}: unsupported dtype code {dtype}")));
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload).map_err(|e| Error::Format(format!("{name}: truncated payload: {e}")))?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<std::path::Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), entries)
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}
