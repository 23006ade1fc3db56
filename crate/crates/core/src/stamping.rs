//! Alpha-compositing of watermarks onto image batches, plus the three
//! baseline perturbation schemes: static, per-image opacity, per-image
//! displacement.
//!
//! The blend is `out = (1 - beta*alpha) * x + beta*alpha * rgb` per pixel.
//! All randomized schemes draw from a per-image ChaCha stream (stream id =
//! image index), so results do not depend on iteration order.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{encode_cifar, load_cifar_batch, read_tensor, write_tensor, ImageBatch, Watermark};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Static,
    Opacity,
    Displacement,
    Learned,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Static => "static",
            Scheme::Opacity => "opacity",
            Scheme::Displacement => "displacement",
            Scheme::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Scheme::Static),
            "opacity" => Ok(Scheme::Opacity),
            "displacement" => Ok(Scheme::Displacement),
            "learned" => Ok(Scheme::Learned),
            other => Err(Error::spec(format!(
                "unknown scheme {other:?}; expected static|opacity|displacement|learned"
            ))),
        }
    }
}

/// Out-of-source watermark pixels carry alpha 0, so the clean image shows
/// through displaced borders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    ZeroAlpha,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StampSpec {
    pub blend_factor: f32,
    pub scheme: Scheme,
    pub opacity_range: (f32, f32),
    pub displacement_range: (i32, i32),
    #[serde(default)]
    pub pad_mode: PadMode,
    pub rng_seed: u64,
}

impl StampSpec {
    pub fn new(scheme: Scheme, blend_factor: f32, rng_seed: u64) -> Self {
        StampSpec {
            blend_factor,
            scheme,
            // visible at 32x32 yet non-destructive defaults
            opacity_range: (0.3 * blend_factor, 1.0 * blend_factor),
            displacement_range: (4, 4),
            pad_mode: PadMode::ZeroAlpha,
            rng_seed,
        }
    }

    /// Scheme-relevant validation; fields the scheme does not use are not
    /// checked so a static spec cannot fail on displacement defaults.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.blend_factor) {
            return Err(Error::spec(format!(
                "blend factor {} outside [0, 1]",
                self.blend_factor
            )));
        }
        if self.scheme == Scheme::Opacity {
            let (lo, hi) = self.opacity_range;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                return Err(Error::spec(format!(
                    "opacity range ({lo}, {hi}) outside [0, 1]"
                )));
            }
            if lo > hi {
                return Err(Error::spec(format!(
                    "opacity range lower bound {lo} exceeds upper bound {hi}"
                )));
            }
        }
        if self.scheme == Scheme::Displacement {
            let (dx, dy) = self.displacement_range;
            if dx < 0 || dy < 0 {
                return Err(Error::spec("displacement bounds must be non-negative"));
            }
            if dx as usize >= w || dy as usize >= h {
                return Err(Error::spec(format!(
                    "displacement bounds ({dx}, {dy}) must stay below image size {w}x{h}"
                )));
            }
        }
        Ok(())
    }
}

/// RNG stream for image `i`; independent of how many images precede it.
pub fn image_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn check_dims(x: &ImageBatch, w: &Watermark) -> Result<()> {
    if x.height() != w.height() || x.width() != w.width() {
        return Err(Error::dimension(format!(
            "watermark {}x{} does not match images {}x{}",
            w.height(),
            w.width(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

#[inline]
fn blend_image(out: &mut [f32], x: &[f32], rgb: &[f32], alpha: &[f32], beta: f32) {
    let hw = alpha.len();
    for c in 0..3 {
        let xo = &x[c * hw..(c + 1) * hw];
        let ro = &rgb[c * hw..(c + 1) * hw];
        let oo = &mut out[c * hw..(c + 1) * hw];
        for j in 0..hw {
            let m = beta * alpha[j];
            oo[j] = ((1.0 - m) * xo[j] + m * ro[j]).clamp(0.0, 1.0);
        }
    }
}

/// Composites one watermark onto every image of the batch.
pub fn stamp(x: &ImageBatch, w: &Watermark, beta: f32) -> Result<ImageBatch> {
    check_dims(x, w)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::spec(format!("blend factor {beta} outside [0, 1]")));
    }
    if beta == 0.0 {
        return Ok(x.clone());
    }
    let chw = 3 * x.height() * x.width();
    let mut out = vec![0.0f32; x.len() * chw];
    for i in 0..x.len() {
        blend_image(
            &mut out[i * chw..(i + 1) * chw],
            x.image(i),
            w.rgb().data(),
            w.alpha().data(),
            beta,
        );
    }
    Ok(ImageBatch::from_parts(
        Tensor::from_vec(&[x.len(), 3, x.height(), x.width()], out),
        x.labels().to_vec(),
    ))
}

/// Static baseline: the identical watermark field on every image.
pub fn stamp_static(x: &ImageBatch, w: &Watermark, spec: &StampSpec) -> Result<ImageBatch> {
    spec.validate(x.height(), x.width())?;
    stamp(x, w, spec.blend_factor)
}

/// Opacity baseline: per-image blend factor drawn uniformly from
/// `spec.opacity_range`. Returns the drawn values for reproducibility.
pub fn stamp_opacity(
    x: &ImageBatch,
    w: &Watermark,
    spec: &StampSpec,
) -> Result<(ImageBatch, Vec<f32>)> {
    spec.validate(x.height(), x.width())?;
    check_dims(x, w)?;
    let (lo, hi) = spec.opacity_range;
    let dist = Uniform::new_inclusive(lo, hi)
        .map_err(|e| Error::spec(format!("opacity range: {e}")))?;
    let chw = 3 * x.height() * x.width();
    let mut out = vec![0.0f32; x.len() * chw];
    let mut betas = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let beta = dist.sample(&mut image_rng(spec.rng_seed, i));
        betas.push(beta);
        blend_image(
            &mut out[i * chw..(i + 1) * chw],
            x.image(i),
            w.rgb().data(),
            w.alpha().data(),
            beta,
        );
    }
    Ok((
        ImageBatch::from_parts(
            Tensor::from_vec(&[x.len(), 3, x.height(), x.width()], out),
            x.labels().to_vec(),
        ),
        betas,
    ))
}

/// Translates watermark planes by (dx, dy); exposed regions get alpha 0.
fn shift_watermark(w: &Watermark, dx: i32, dy: i32) -> Watermark {
    let (h, wd) = (w.height(), w.width());
    let mut rgb = vec![0.0f32; 3 * h * wd];
    let mut alpha = vec![0.0f32; h * wd];
    let src_rgb = w.rgb().data();
    let src_a = w.alpha().data();
    for y in 0..h as i32 {
        for x in 0..wd as i32 {
            let sy = y - dy;
            let sx = x - dx;
            if sy < 0 || sx < 0 || sy >= h as i32 || sx >= wd as i32 {
                continue;
            }
            let dst = (y as usize) * wd + x as usize;
            let src = (sy as usize) * wd + sx as usize;
            alpha[dst] = src_a[src];
            for c in 0..3 {
                rgb[c * h * wd + dst] = src_rgb[c * h * wd + src];
            }
        }
    }
    Watermark::new(
        Tensor::from_vec(&[3, h, wd], rgb),
        Tensor::from_vec(&[1, h, wd], alpha),
    )
    .expect("shifted watermark stays in range")
}

/// Displacement baseline: per-image uniform translation of the watermark.
/// Offsets are drawn as (dx, dy), dx first, from the image's RNG stream.
pub fn stamp_displaced(
    x: &ImageBatch,
    w: &Watermark,
    spec: &StampSpec,
) -> Result<(ImageBatch, Vec<(i32, i32)>)> {
    spec.validate(x.height(), x.width())?;
    check_dims(x, w)?;
    let (dx_max, dy_max) = spec.displacement_range;
    let chw = 3 * x.height() * x.width();
    let mut out = vec![0.0f32; x.len() * chw];
    let mut offsets = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut rng = image_rng(spec.rng_seed, i);
        let dx = rng.random_range(-dx_max..=dx_max);
        let dy = rng.random_range(-dy_max..=dy_max);
        offsets.push((dx, dy));
        let shifted = if dx == 0 && dy == 0 {
            None
        } else {
            Some(shift_watermark(w, dx, dy))
        };
        let wm = shifted.as_ref().unwrap_or(w);
        blend_image(
            &mut out[i * chw..(i + 1) * chw],
            x.image(i),
            wm.rgb().data(),
            wm.alpha().data(),
            spec.blend_factor,
        );
    }
    Ok((
        ImageBatch::from_parts(
            Tensor::from_vec(&[x.len(), 3, x.height(), x.width()], out),
            x.labels().to_vec(),
        ),
        offsets,
    ))
}

/// Tensor-level blend of a per-image RGBA stack onto a batch:
/// x is [N, 3, H, W], rgba is [N, 4, H, W]. Same formula as `stamp`.
pub fn blend_tensor(x: &Tensor<f32>, rgba: &Tensor<f32>, beta: f32) -> Tensor<f32> {
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    assert_eq!(rgba.shape(), &[n, 4, h, w], "rgba stack shape");
    let hw = h * w;
    let mut out = vec![0.0f32; n * 3 * hw];
    for i in 0..n {
        let plane = &rgba.data()[i * 4 * hw..(i + 1) * 4 * hw];
        blend_image(
            &mut out[i * 3 * hw..(i + 1) * 3 * hw],
            &x.data()[i * 3 * hw..(i + 1) * 3 * hw],
            &plane[..3 * hw],
            &plane[3 * hw..],
            beta,
        );
    }
    Tensor::from_vec(s, out)
}

/// Learned scheme: each image composited with its own synthesized watermark.
pub fn stamp_learned(x: &ImageBatch, wms: &[Watermark], beta: f32) -> Result<ImageBatch> {
    if wms.len() != x.len() {
        return Err(Error::dimension(format!(
            "{} watermarks for {} images",
            wms.len(),
            x.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::spec(format!("blend factor {beta} outside [0, 1]")));
    }
    for wm in wms {
        check_dims(x, wm)?;
    }
    let chw = 3 * x.height() * x.width();
    let mut out = vec![0.0f32; x.len() * chw];
    for i in 0..x.len() {
        blend_image(
            &mut out[i * chw..(i + 1) * chw],
            x.image(i),
            wms[i].rgb().data(),
            wms[i].alpha().data(),
            beta,
        );
    }
    Ok(ImageBatch::from_parts(
        Tensor::from_vec(&[x.len(), 3, x.height(), x.width()], out),
        x.labels().to_vec(),
    ))
}

/// Sidecar written next to every stamped dataset so experiments are
/// self-describing: the spec, the seed and the per-image draws.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StampSidecar {
    pub spec: StampSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub opacities: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub offsets: Option<Vec<(i32, i32)>>,
}

pub const STAMPED_DATA_FILE: &str = "data.bin";
pub const STAMPED_SIDECAR_FILE: &str = "sidecar.json";
pub const STAMPED_WPRIME_FILE: &str = "wprime.dstn";

/// A stamped dataset directory: CIFAR-format binary plus JSON sidecar and,
/// for the learned scheme, the synthesized watermark stack.
pub struct StampedDataset {
    pub batch: ImageBatch,
    pub sidecar: StampSidecar,
    pub wprime: Option<Vec<Watermark>>,
}

pub fn write_stamped_dataset(
    dir: impl AsRef<Path>,
    batch: &ImageBatch,
    sidecar: &StampSidecar,
    wprime: Option<&[Watermark]>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join(STAMPED_DATA_FILE);
    fs::write(&data_path, encode_cifar(batch)?).map_err(|e| Error::io(&data_path, e))?;
    let sc_path = dir.join(STAMPED_SIDECAR_FILE);
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::format(0, format!("sidecar encode: {e}")))?;
    fs::write(&sc_path, json).map_err(|e| Error::io(&sc_path, e))?;
    if let Some(wms) = wprime {
        let (h, w) = (batch.height(), batch.width());
        let mut stack = Vec::with_capacity(wms.len() * 4 * h * w);
        for wm in wms {
            stack.extend_from_slice(wm.to_rgba_tensor().data());
        }
        let t = Tensor::from_vec(&[wms.len(), 4, h, w], stack);
        write_tensor(&t, dir.join(STAMPED_WPRIME_FILE))?;
    }
    Ok(())
}

pub fn read_stamped_dataset(dir: impl AsRef<Path>) -> Result<StampedDataset> {
    let dir = dir.as_ref();
    let batch = load_cifar_batch(dir.join(STAMPED_DATA_FILE))?;
    let sc_path = dir.join(STAMPED_SIDECAR_FILE);
    let raw = fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sidecar: StampSidecar = serde_json::from_str(&raw)
        .map_err(|e| Error::format(0, format!("sidecar parse: {e}")))?;
    let wp_path = dir.join(STAMPED_WPRIME_FILE);
    let wprime = if wp_path.exists() {
        Some(read_wprime_stack(&wp_path)?)
    } else {
        None
    };
    Ok(StampedDataset {
        batch,
        sidecar,
        wprime,
    })
}

/// Reads a [N, 4, H, W] tensor file back into per-image watermarks.
pub fn read_wprime_stack(path: impl AsRef<Path>) -> Result<Vec<Watermark>> {
    let t = read_tensor(path)?;
    let s = t.shape();
    if s.len() != 4 || s[1] != 4 {
        return Err(Error::dimension(format!(
            "watermark stack must be [N, 4, H, W], got {s:?}"
        )));
    }
    let chw = 4 * s[2] * s[3];
    (0..s[0])
        .map(|i| {
            let plane = Tensor::from_vec(&[4, s[2], s[3]], t.data()[i * chw..(i + 1) * chw].to_vec());
            Watermark::from_rgba_tensor(&plane)
        })
        .collect()
}
