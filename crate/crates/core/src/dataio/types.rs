use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of classes in the CIFAR-10 label space.
pub const NUM_CLASSES: usize = 10;
/// CIFAR-10 image edge length.
pub const CIFAR_HW: usize = 32;

/// A labelled batch of RGB images, data laid out [N, 3, H, W] in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor<f32>,
    labels: Vec<u8>,
}

impl ImageBatch {
    /// Validating constructor; enforces the value-range and label invariants.
    pub fn new(data: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dimension(format!(
                "image batch must be [N, 3, H, W], got {shape:?}"
            )));
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::dimension("image batch must hold at least one image"));
        }
        if labels.len() != n {
            return Err(Error::dimension(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::range(format!(
                "label {bad} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::range("image values must lie in [0, 1]"));
        }
        Ok(ImageBatch { data, labels })
    }

    /// Construction path for values that are in range by construction
    /// (clamped stamping output, decoded 8-bit pixels).
    pub(crate) fn from_parts(data: Tensor<f32>, labels: Vec<u8>) -> Self {
        debug_assert!(data.shape().len() == 4 && data.shape()[1] == 3);
        debug_assert_eq!(data.shape()[0], labels.len());
        debug_assert!(data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        ImageBatch { data, labels }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Pixel plane of one image: contiguous [3, H, W] slice.
    pub fn image(&self, i: usize) -> &[f32] {
        let chw = 3 * self.height() * self.width();
        &self.data.data()[i * chw..(i + 1) * chw]
    }

    /// New batch holding the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let chw = 3 * self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch::from_parts(
            Tensor::from_vec(&[indices.len(), 3, self.height(), self.width()], data),
            labels,
        )
    }

    /// First `n` images of the batch.
    pub fn take(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Concatenates batches with identical image geometry.
    pub fn concat(batches: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::dimension("concat of zero batches"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.height() != h || b.width() != w {
                return Err(Error::dimension("concat of batches with mixed geometry"));
            }
            data.extend_from_slice(b.data.data());
            labels.extend_from_slice(&b.labels);
        }
        let n = labels.len();
        Ok(ImageBatch::from_parts(
            Tensor::from_vec(&[n, 3, h, w], data),
            labels,
        ))
    }
}

/// An RGBA watermark: color planes plus alpha matte, each in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Watermark {
    rgb: Tensor<f32>,
    alpha: Tensor<f32>,
}

impl Watermark {
    pub fn new(rgb: Tensor<f32>, alpha: Tensor<f32>) -> Result<Self> {
        let rs = rgb.shape();
        let al = alpha.shape();
        if rs.len() != 3 || rs[0] != 3 {
            return Err(Error::dimension(format!(
                "watermark rgb must be [3, H, W], got {rs:?}"
            )));
        }
        if al.len() != 3 || al[0] != 1 || al[1] != rs[1] || al[2] != rs[2] {
            return Err(Error::dimension(format!(
                "watermark alpha must be [1, {}, {}], got {al:?}",
                rs[1], rs[2]
            )));
        }
        for v in rgb.data().iter().chain(alpha.data()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::range("watermark values must lie in [0, 1]"));
            }
        }
        Ok(Watermark { rgb, alpha })
    }

    /// Builds a watermark from a [4, H, W] tensor (channels RGB + A).
    pub fn from_rgba_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 4 {
            return Err(Error::dimension(format!(
                "rgba tensor must be [4, H, W], got {s:?}"
            )));
        }
        let hw = s[1] * s[2];
        let rgb = Tensor::from_vec(&[3, s[1], s[2]], t.data()[..3 * hw].to_vec());
        let alpha = Tensor::from_vec(&[1, s[1], s[2]], t.data()[3 * hw..].to_vec());
        Watermark::new(rgb, alpha)
    }

    /// Packs rgb + alpha back into one [4, H, W] tensor.
    pub fn to_rgba_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(4 * h * w);
        data.extend_from_slice(self.rgb.data());
        data.extend_from_slice(self.alpha.data());
        Tensor::from_vec(&[4, h, w], data)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn rgb(&self) -> &Tensor<f32> {
        &self.rgb
    }

    pub fn alpha(&self) -> &Tensor<f32> {
        &self.alpha
    }
}

/// One named parameter tensor of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Checkpoint metadata: which architecture, which seed, how many steps in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamsMeta {
    pub arch: String,
    pub seed: u64,
    pub step: u64,
}

/// Named, shaped, ordered parameter collection; the unit of checkpointing.
/// Entry order is canonical (architecture definition order) so that
/// serialization is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub meta: ParamsMeta,
    pub entries: Vec<ParamEntry>,
}

impl NetworkParams {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::format(0, format!("duplicate entry name {}", e.name)));
            }
            let len: usize = e.shape.iter().product();
            if len != e.values.len() {
                return Err(Error::dimension(format!(
                    "entry {}: {} values for shape {:?}",
                    e.name,
                    e.values.len(),
                    e.shape
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Raw little-endian byte image of all values, used for exact
    /// parameter-freeze assertions.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
