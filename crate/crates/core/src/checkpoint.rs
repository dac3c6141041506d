//! Flat binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OOMB" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name bytes (utf-8) | rank: u32 | dims: rank × u64 | data: numel × f32
//! ```
//!
//! Tensors are always stored as `f32`, whatever width the model trains in.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"OOMB";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params.named() {
        let name = name.to_string();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every `(name, tensor)` record in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into `params`, matching tensors by name and shape.
pub fn load_into<T: Scalar, R: Read>(params: &mut ModelParams<T>, r: R) -> Result<()> {
    let records = read_checkpoint(r)?;
    for (name, t) in params.named_mut() {
        let key = name.to_string();
        let (_, src) = records
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{key}: shape {:?} vs {:?}",
                src.shape(),
                t.shape()
            )));
        }
        for (d, &s) in t.data_mut().iter_mut().zip(src.data()) {
            *d = T::from_f64(s as f64);
        }
    }
    Ok(())
}

pub fn save<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load<T: Scalar>(params: &mut ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    load_into(params, std::fs::File::open(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn header_bytes_and_round_trip() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"OOMB");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        // first record: "emb", rank 2, [vocab, d_model]
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..15], b"emb");
        assert_eq!(&buf[15..19], &2u32.to_le_bytes());
        assert_eq!(&buf[19..27], &256u64.to_le_bytes());
        assert_eq!(&buf[27..35], &64u64.to_le_bytes());
        assert_eq!(&buf[35..39], &p.embed.data()[0].to_le_bytes());

        let mut q = ModelParams::<f32>::init(&cfg, 4).unwrap();
        load_into(&mut q, buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]).is_err());
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Format(_))));
    }
}
