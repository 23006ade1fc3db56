//! Watermark ingestion: 8-bit RGBA PNG or a [4, H, W] raw tensor file.
//! Sources whose size differs from the 32x32 target fail loudly; resampling
//! is an offline concern.

use std::fs;
use std::path::Path;

use crate::dataio::tensorfile::{decode_tensor, encode_tensor, TENSOR_MAGIC};
use crate::dataio::types::{Watermark, CIFAR_HW};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: [u8; 4] = [0x89, b'P', b'N', b'G'];

/// Loads a watermark and requires it to match the dataset geometry exactly.
pub fn load_watermark(path: impl AsRef<Path>) -> Result<Watermark> {
    load_watermark_sized(path, CIFAR_HW, CIFAR_HW)
}

pub fn load_watermark_sized(path: impl AsRef<Path>, h: usize, w: usize) -> Result<Watermark> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let wm = if bytes.len() >= 4 && bytes[..4] == TENSOR_MAGIC {
        watermark_from_tensor_bytes(&bytes)?
    } else if bytes.len() >= 4 && bytes[..4] == PNG_SIGNATURE {
        watermark_from_png_bytes(&bytes)?
    } else {
        return Err(Error::format(
            0,
            "watermark file is neither a PNG nor a raw tensor file",
        ));
    };
    if wm.height() != h || wm.width() != w {
        return Err(Error::dimension(format!(
            "watermark is {}x{}, dataset images are {}x{}",
            wm.height(),
            wm.width(),
            h,
            w
        )));
    }
    Ok(wm)
}

fn watermark_from_tensor_bytes(bytes: &[u8]) -> Result<Watermark> {
    let t = decode_tensor(bytes)?;
    Watermark::from_rgba_tensor(&t)
}

fn watermark_from_png_bytes(bytes: &[u8]) -> Result<Watermark> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(0, format!("png decode failed: {e}")))?;
    let rgba = match img {
        image::DynamicImage::ImageRgba8(buf) => buf,
        image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageLuma8(_) => {
            return Err(Error::format(0, "png has no alpha channel; RGBA required"))
        }
        other => {
            return Err(Error::format(
                0,
                format!(
                    "png must be 8-bit RGBA, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut planes = vec![0.0f32; 4 * h * w];
    for (x, y, px) in rgba.enumerate_pixels() {
        let at = y as usize * w + x as usize;
        for c in 0..4 {
            planes[c * h * w + at] = px.0[c] as f32 / 255.0;
        }
    }
    Watermark::from_rgba_tensor(&Tensor::from_vec(&[4, h, w], planes))
}

/// Writes a watermark as an 8-bit RGBA PNG (round-half-to-even quantization).
pub fn save_watermark_png(wm: &Watermark, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (wm.height(), wm.width());
    let q = |v: f32| (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8;
    let mut buf = image::RgbaImage::new(w as u32, h as u32);
    let rgb = wm.rgb().data();
    let alpha = wm.alpha().data();
    for y in 0..h {
        for x in 0..w {
            let at = y * w + x;
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgba([
                    q(rgb[at]),
                    q(rgb[h * w + at]),
                    q(rgb[2 * h * w + at]),
                    q(alpha[at]),
                ]),
            );
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(0, format!("png encode failed for {}: {e}", path.display())))
}

/// Writes a watermark as a [4, H, W] raw tensor file (lossless).
pub fn save_watermark_tensor(wm: &Watermark, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(&wm.to_rgba_tensor())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_watermark(h: usize, w: usize) -> Watermark {
        let rgb = Tensor::full(&[3, h, w], 0.5);
        let alpha = Tensor::full(&[1, h, w], 1.0);
        Watermark::new(rgb, alpha).unwrap()
    }

    #[test]
    fn png_roundtrip_alpha_all_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wm.png");
        save_watermark_png(&flat_watermark(32, 32), &p).unwrap();
        let back = load_watermark(&p).unwrap();
        assert!(back.alpha().data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn rgb_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let buf = image::RgbImage::from_pixel(32, 32, image::Rgb([10, 20, 30]));
        buf.save_with_format(&p, image::ImageFormat::Png).unwrap();
        match load_watermark(&p) {
            Err(Error::Format { what, .. }) => assert!(what.contains("alpha")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_names_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        save_watermark_png(&flat_watermark(16, 48), &p).unwrap();
        match load_watermark(&p) {
            Err(Error::Dimension { what }) => {
                assert!(what.contains("16x48") && what.contains("32x32"), "{what}");
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wm.dstn");
        let wm = flat_watermark(32, 32);
        save_watermark_tensor(&wm, &p).unwrap();
        assert_eq!(load_watermark(&p).unwrap(), wm);
    }

    #[test]
    fn png_quantization_error_bounded() {
        // irregular values; decode(encode) error must stay within 1/510
        let h = 32;
        let w = 32;
        let rgb = Tensor::from_vec(
            &[3, h, w],
            (0..3 * h * w)
                .map(|i| ((i * 37 % 1009) as f32 / 1008.0))
                .collect(),
        );
        let alpha = Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|i| ((i * 13 % 501) as f32 / 500.0)).collect(),
        );
        let wm = Watermark::new(rgb, alpha).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        save_watermark_png(&wm, &p).unwrap();
        let back = load_watermark(&p).unwrap();
        let worst = wm
            .to_rgba_tensor()
            .max_abs_diff(&back.to_rgba_tensor());
        assert!(worst <= 1.0 / 510.0 + 1e-6, "worst error {worst}");
    }
}
