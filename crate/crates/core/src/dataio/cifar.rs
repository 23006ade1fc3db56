//! CIFAR-10 binary codec.
//!
//! Record layout: 1 label byte followed by 3072 pixel bytes (channel-planar
//! R, G, B, row-major), 3073 bytes per record. Files hold a whole number of
//! records.

use std::fs;
use std::path::Path;

use crate::dataio::types::{ImageBatch, CIFAR_HW, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 1 + 3 * CIFAR_HW * CIFAR_HW;

/// Decodes a CIFAR-10 binary byte string into an image batch.
/// Pixels map p -> p / 255.0; labels pass through.
pub fn decode_cifar(bytes: &[u8]) -> Result<ImageBatch> {
    if bytes.is_empty() {
        return Err(Error::format(0, "empty batch file"));
    }
    let n = bytes.len() / RECORD_BYTES;
    let rem = bytes.len() % RECORD_BYTES;
    if rem != 0 {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            what: format!(
                "record {n} truncated: need {RECORD_BYTES} bytes, found {rem}"
            ),
        });
    }

    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::range(format!(
                "record {i}: label byte {label} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok(ImageBatch::new(
        Tensor::from_vec(&[n, 3, CIFAR_HW, CIFAR_HW], data),
        labels,
    )?)
}

/// Encodes a batch back to CIFAR-10 binary, re-quantizing pixels to 8 bit
/// with round-half-to-even. Requires 32x32 geometry.
pub fn encode_cifar(batch: &ImageBatch) -> Result<Vec<u8>> {
    if batch.height() != CIFAR_HW || batch.width() != CIFAR_HW {
        return Err(Error::dimension(format!(
            "CIFAR encoding requires {CIFAR_HW}x{CIFAR_HW} images, got {}x{}",
            batch.height(),
            batch.width()
        )));
    }
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for i in 0..batch.len() {
        out.push(batch.labels()[i]);
        out.extend(
            batch
                .image(i)
                .iter()
                .map(|&p| (p * 255.0).round_ties_even().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn load_cifar_batch(path: impl AsRef<Path>) -> Result<ImageBatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar(&bytes)
}

pub fn save_cifar_batch(batch: &ImageBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar(batch)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_fixture() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        let batch = decode_cifar(&bytes).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.labels(), &[7]);
        assert!(batch.data().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = vec![0u8; 3072];
        match decode_cifar(&bytes) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 3072),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut bytes = vec![10u8];
        bytes.extend(std::iter::repeat(0u8).take(3072));
        assert!(matches!(decode_cifar(&bytes), Err(Error::Range { .. })));
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(decode_cifar(&[]), Err(Error::Format { .. })));
    }

    #[test]
    fn decode_encode_roundtrip_bytes() {
        // two records with a pixel gradient
        let mut bytes = Vec::new();
        for rec in 0..2u8 {
            bytes.push(rec);
            bytes.extend((0..3072).map(|i| ((i as usize + rec as usize * 7) % 256) as u8));
        }
        let batch = decode_cifar(&bytes).unwrap();
        assert_eq!(encode_cifar(&batch).unwrap(), bytes);
    }
}
