//! Named-array container shared by model checkpoints and raw dataset dumps.
//!
//! Layout: the line `ADVSTCKPT v1\n`, then until end of file one record per
//! array: name length (u64 LE), UTF-8 name, rank (u64 LE), extents (u64 LE
//! each), and the values as f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"ADVSTCKPT v1\n";

pub fn write_arrays<W: Write>(mut w: W, arrays: &[(&str, &Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    /// Fills `buf`; `Ok(false)` on a clean end of input before the first byte.
    fn fill(&mut self, buf: &mut [u8], allow_eof: bool) -> Result<bool> {
        let mut read = 0;
        while read < buf.len() {
            let n = self.inner.read(&mut buf[read..])?;
            if n == 0 {
                if read == 0 && allow_eof {
                    return Ok(false);
                }
                return Err(Error::Format {
                    offset: self.offset + read as u64,
                    detail: format!("truncated: needed {} more bytes", buf.len() - read),
                });
            }
            read += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, false)?;
        Ok(u64::from_le_bytes(b))
    }
}

const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 8;

pub fn read_arrays<R: Read>(r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let mut magic = vec![0u8; MAGIC.len()];
    cur.fill(&mut magic, false)?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, detail: "missing ADVSTCKPT v1 header".into() });
    }
    let mut out = Vec::new();
    loop {
        let start = cur.offset;
        let mut len = [0u8; 8];
        if !cur.fill(&mut len, true)? {
            break;
        }
        let len = u64::from_le_bytes(len);
        if len > MAX_NAME {
            return Err(Error::Format { offset: start, detail: format!("name length {len}") });
        }
        let mut name = vec![0u8; len as usize];
        cur.fill(&mut name, false)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format { offset: start + 8, detail: "array name is not UTF-8".into() })?;
        let rank_at = cur.offset;
        let rank = cur.u64()?;
        if rank > MAX_RANK {
            return Err(Error::Format { offset: rank_at, detail: format!("rank {rank}") });
        }
        let shape = (0..rank).map(|_| cur.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Format {
            offset: rank_at,
            detail: format!("extents {shape:?} overflow"),
        })?;
        let mut raw = vec![0u8; count * 4];
        cur.fill(&mut raw, false)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, arrays: &[(&str, &Tensor<f32>)]) -> Result<()> {
    write_arrays(BufWriter::new(File::create(path)?), arrays)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    read_arrays(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_record_reports_offset() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = Vec::new();
        write_arrays(&mut bytes, &[("w", &t)]).unwrap();
        let cut = bytes.len() - 3;
        match read_arrays(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut && offset as usize > MAGIC.len()),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(read_arrays(&b"NOPE"[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let mut bytes = Vec::new();
        write_arrays(&mut bytes, &[("ab", &t)]).unwrap();
        let mut expected = MAGIC.to_vec();
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }
}
