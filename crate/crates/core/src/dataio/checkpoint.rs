//! Network checkpoint format ("DSCK").
//!
//! Layout, all little-endian:
//!   magic "DSCK" | version u8 = 1 |
//!   metadata: arch-id (u16 len + utf8) | seed u64 | step u64 |
//!   count u32 | per entry: name (u16 len + utf8) | rank u8 |
//!   dims u32 x rank | payload f32.
//!
//! Roundtrips are bit-exact, including entry order.

use std::fs;
use std::path::Path;

use crate::dataio::tensorfile::ByteReader;
use crate::dataio::types::{NetworkParams, ParamEntry, ParamsMeta};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut ByteReader<'_>, what: &str) -> Result<String> {
    let len = r.u16(what)? as usize;
    let raw = r.take(len, what)?;
    String::from_utf8(raw.to_vec())
        .map_err(|_| Error::format(r.offset(), format!("{what}: invalid utf-8")))
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    push_str(&mut out, &params.meta.arch);
    out.extend_from_slice(&params.meta.seed.to_le_bytes());
    out.extend_from_slice(&params.meta.step.to_le_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        push_str(&mut out, &e.name);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let arch = read_str(&mut r, "arch id")?;
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name = read_str(&mut r, &format!("entry {i} name"))?;
        let rank = r.u8(&format!("entry {i} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for d in 0..rank {
            let dim = r.u32(&format!("entry {i} dim {d}"))? as usize;
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| Error::format(r.offset(), "dimension product overflow"))?;
            shape.push(dim);
        }
        let values = r.f32s(numel, &format!("entry {i} payload"))?;
        entries.push(ParamEntry {
            name,
            shape,
            values,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes after last entry", r.remaining()),
        ));
    }
    let params = NetworkParams {
        meta: ParamsMeta { arch, seed, step },
        entries,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ParamsMeta {
        ParamsMeta {
            arch: "W".into(),
            seed: 0,
            step: 0,
        }
    }

    #[test]
    fn empty_roundtrip() {
        let p = NetworkParams {
            meta: meta(),
            entries: vec![],
        };
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn zero_tensor_roundtrip() {
        let p = NetworkParams {
            meta: meta(),
            entries: vec![ParamEntry {
                name: "conv1.w".into(),
                shape: vec![4, 7, 3, 3],
                values: vec![0.0; 4 * 7 * 9],
            }],
        };
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn save_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = NetworkParams {
            meta: ParamsMeta {
                arch: "F-small".into(),
                seed: 0,
                step: 42,
            },
            entries: (0..3)
                .map(|i| ParamEntry {
                    name: format!("t{i}"),
                    shape: vec![5, 7],
                    values: (0..35).map(|_| rng.random::<f32>()).collect(),
                })
                .collect(),
        };
        assert_eq!(encode_checkpoint(&p), encode_checkpoint(&p));
    }

    #[test]
    fn truncation_and_magic_errors_are_distinct() {
        let p = NetworkParams {
            meta: meta(),
            entries: vec![ParamEntry {
                name: "t".into(),
                shape: vec![3],
                values: vec![1.0, 2.0, 3.0],
            }],
        };
        let enc = encode_checkpoint(&p);
        assert!(matches!(
            decode_checkpoint(&enc[..enc.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = enc.clone();
        bad[0] = b'x';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::MagicMismatch { .. })
        ));
        let mut badv = enc;
        badv[4] = 77;
        assert!(matches!(
            decode_checkpoint(&badv),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
