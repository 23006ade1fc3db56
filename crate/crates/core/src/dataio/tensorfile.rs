//! Raw tensor file format ("DSTN").
//!
//! Layout, all little-endian:
//!   magic "DSTN" (4 bytes) | version u8 = 1 | dtype u8 (0 = float32) |
//!   rank u8 | dims u32 x rank | payload f32 row-major.
//! Payload byte length must equal 4 * product(dims) exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"DSTN";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Bounds-checked little-endian reader used by both binary parsers here.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                what: format!("{what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::MagicMismatch {
                expected,
                found: [found[0], found[1], found[2], found[3]],
            });
        }
        Ok(())
    }

    /// Reads `count` f32 values after checking they actually fit; the length
    /// check precedes any allocation so hostile headers cannot balloon memory.
    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let need = count.checked_mul(4).ok_or_else(|| {
            Error::format(self.offset(), format!("{what}: payload size overflow"))
        })?;
        let raw = self.take(need, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses dims and validates their product against a remaining-byte budget.
fn read_dims(r: &mut ByteReader<'_>, rank: usize) -> Result<(Vec<usize>, usize)> {
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let d = r.u32(&format!("dim {i}"))? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(r.offset(), "dimension product overflow"))?;
        dims.push(d);
    }
    Ok((dims, numel))
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u8("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::VersionMismatch {
            expected: TENSOR_VERSION,
            found: version,
        });
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(r.offset() - 1, format!("unknown dtype {dtype}")));
    }
    let rank = r.u8("rank")? as usize;
    let (dims, numel) = read_dims(&mut r, rank)?;
    let data = r.f32s(numel, "tensor payload")?;
    if r.remaining() != 0 {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes after payload", r.remaining()),
        ));
    }
    Ok(Tensor::from_vec(&dims, data))
}

pub fn write_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0f32, 1.5, -2.25, 3.0, 0.125, 9.75]);
        let enc = encode_tensor(&t);
        let back = decode_tensor(&enc).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn wrong_magic() {
        let mut enc = encode_tensor(&Tensor::zeros(&[1]));
        enc[0] = b'X';
        assert!(matches!(
            decode_tensor(&enc),
            Err(Error::MagicMismatch { .. })
        ));
    }

    #[test]
    fn wrong_version() {
        let mut enc = encode_tensor(&Tensor::zeros(&[1]));
        enc[4] = 9;
        assert!(matches!(
            decode_tensor(&enc),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 9
            })
        ));
    }

    #[test]
    fn truncated_payload() {
        let enc = encode_tensor(&Tensor::zeros(&[4]));
        assert!(matches!(
            decode_tensor(&enc[..enc.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut enc = encode_tensor(&Tensor::zeros(&[2]));
        enc.push(0);
        assert!(matches!(decode_tensor(&enc), Err(Error::Format { .. })));
    }

    #[test]
    fn hostile_dims_do_not_allocate() {
        // rank 4 with huge dims, no payload: must error, not OOM
        let mut enc = vec![];
        enc.extend_from_slice(&TENSOR_MAGIC);
        enc.push(TENSOR_VERSION);
        enc.push(DTYPE_F32);
        enc.push(4);
        for _ in 0..4 {
            enc.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_tensor(&enc).is_err());
    }
}
