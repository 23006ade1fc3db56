//! Network architectures as explicit layer graphs with shape contracts,
//! deterministic initialization, and forward semantics on the autodiff tape.
//!
//! Architectures:
//!   W         - watermarking network, 4 convolutions, 7ch in / 4ch out,
//!               sigmoid head so synthesized watermarks stay in [0, 1].
//!   V         - autoencoder over 4-channel watermarks, 5 convolutions.
//!   D         - discriminator, 3 stride-2 convolutions + global pooling to
//!               a scalar logit.
//!   D-literal - discriminator built from 3 transposed convolutions instead
//!               (opt-in variant; upsamples, then pools to a scalar).
//!   F-small   - compact conv classifier with batch norm.
//!   F-alexnet - deeper classic-style classifier (stacked convs + 2 dense).

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataio::{ImageBatch, NetworkParams, ParamEntry, ParamsMeta, Watermark};
use crate::error::{Error, Result};
use crate::tensor::{el, Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Momentum for running-statistics updates (fraction of the batch value).
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchId {
    W,
    V,
    D,
    DLiteral,
    FSmall,
    FAlexnet,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::W => "W",
            ArchId::V => "V",
            ArchId::D => "D",
            ArchId::DLiteral => "D-literal",
            ArchId::FSmall => "F-small",
            ArchId::FAlexnet => "F-alexnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "W" => Ok(ArchId::W),
            "V" => Ok(ArchId::V),
            "D" => Ok(ArchId::D),
            "D-literal" => Ok(ArchId::DLiteral),
            "F-small" => Ok(ArchId::FSmall),
            "F-alexnet" => Ok(ArchId::FAlexnet),
            other => Err(Error::spec(format!(
                "unknown architecture id {other:?}; known: W, V, D, D-literal, F-small, F-alexnet"
            ))),
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, ArchId::FSmall | ArchId::FAlexnet)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    ConvT {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        n_in: usize,
        n_out: usize,
    },
    BatchNorm {
        c: usize,
    },
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Tanh,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
}

#[derive(Clone, Debug)]
pub struct ArchitectureSpec {
    pub id: ArchId,
    /// Per-sample input shape [C, H, W].
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
}

fn conv_out(i: usize, k: usize, s: usize, p: usize) -> usize {
    (i + 2 * p - k) / s + 1
}

fn convt_out(i: usize, k: usize, s: usize, p: usize) -> usize {
    (i - 1) * s + k - 2 * p
}

impl ArchitectureSpec {
    /// Walks the layer stack and checks that the shape algebra closes; the
    /// error names the offending layer index.
    pub fn validate(&self) -> Result<()> {
        let out = self.infer_output_shape()?;
        if out != self.output_shape {
            return Err(Error::Shape {
                layer: None,
                what: format!(
                    "declared output {:?} but layers produce {:?}",
                    self.output_shape, out
                ),
            });
        }
        Ok(())
    }

    pub fn infer_output_shape(&self) -> Result<Vec<usize>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |what: String| Error::Shape {
                layer: Some(i),
                what,
            };
            shape = match layer {
                LayerSpec::Conv {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != *c_in {
                        return Err(fail(format!("conv expects [{c_in}, H, W], got {shape:?}")));
                    }
                    vec![
                        *c_out,
                        conv_out(shape[1], *k, *stride, *pad),
                        conv_out(shape[2], *k, *stride, *pad),
                    ]
                }
                LayerSpec::ConvT {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != *c_in {
                        return Err(fail(format!(
                            "transposed conv expects [{c_in}, H, W], got {shape:?}"
                        )));
                    }
                    vec![
                        *c_out,
                        convt_out(shape[1], *k, *stride, *pad),
                        convt_out(shape[2], *k, *stride, *pad),
                    ]
                }
                LayerSpec::Dense { n_in, n_out } => {
                    if shape != vec![*n_in] {
                        return Err(fail(format!("dense expects [{n_in}], got {shape:?}")));
                    }
                    vec![*n_out]
                }
                LayerSpec::BatchNorm { c } => {
                    if shape.len() != 3 || shape[0] != *c {
                        return Err(fail(format!("batch norm expects [{c}, H, W], got {shape:?}")));
                    }
                    shape
                }
                LayerSpec::MaxPool2 => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(fail(format!("max pool expects even [C,H,W], got {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(fail(format!("global pool expects [C,H,W], got {shape:?}")));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Flatten => {
                    vec![shape.iter().product()]
                }
                LayerSpec::Relu | LayerSpec::LeakyRelu(_) | LayerSpec::Sigmoid | LayerSpec::Tanh => {
                    shape
                }
            };
        }
        Ok(shape)
    }

    /// Canonical (name, shape) parameter list in definition order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { c_in, c_out, k, .. } => {
                    out.push((format!("l{i}.weight"), vec![*c_out, *c_in, *k, *k]));
                    out.push((format!("l{i}.bias"), vec![*c_out]));
                }
                LayerSpec::ConvT { c_in, c_out, k, .. } => {
                    out.push((format!("l{i}.weight"), vec![*c_in, *c_out, *k, *k]));
                    out.push((format!("l{i}.bias"), vec![*c_out]));
                }
                LayerSpec::Dense { n_in, n_out } => {
                    out.push((format!("l{i}.weight"), vec![*n_out, *n_in]));
                    out.push((format!("l{i}.bias"), vec![*n_out]));
                }
                LayerSpec::BatchNorm { c } => {
                    out.push((format!("l{i}.gamma"), vec![*c]));
                    out.push((format!("l{i}.beta"), vec![*c]));
                    out.push((format!("l{i}.running_mean"), vec![*c]));
                    out.push((format!("l{i}.running_var"), vec![*c]));
                }
                _ => {}
            }
        }
        out
    }
}

/// Running statistics are state, not trainable parameters.
pub fn is_trainable(name: &str) -> bool {
    !name.ends_with(".running_mean") && !name.ends_with(".running_var")
}

fn conv(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec::Conv {
        c_in,
        c_out,
        k: 3,
        stride: 1,
        pad: 1,
    }
}

fn conv_s2(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec::Conv {
        c_in,
        c_out,
        k: 3,
        stride: 2,
        pad: 1,
    }
}

fn convt_s2(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec::ConvT {
        c_in,
        c_out,
        k: 3,
        stride: 2,
        pad: 1,
    }
}

/// Architecture table. Channel widths are sized for CPU throughput while
/// keeping the stated layer counts and 32x32 geometry.
pub fn architecture(id: ArchId) -> ArchitectureSpec {
    use LayerSpec::*;
    let spec = match id {
        // 3ch image + 4ch watermark concatenated -> 4ch synthesized watermark
        ArchId::W => ArchitectureSpec {
            id,
            input_shape: [7, 32, 32],
            layers: vec![
                conv(7, 16),
                Relu,
                conv(16, 32),
                Relu,
                conv(32, 16),
                Relu,
                conv(16, 4),
                Sigmoid,
            ],
            output_shape: vec![4, 32, 32],
        },
        ArchId::V => ArchitectureSpec {
            id,
            input_shape: [4, 32, 32],
            layers: vec![
                conv(4, 16),
                Relu,
                conv(16, 24),
                Relu,
                conv(24, 24),
                Relu,
                conv(24, 16),
                Relu,
                conv(16, 4),
                Sigmoid,
            ],
            output_shape: vec![4, 32, 32],
        },
        ArchId::D => ArchitectureSpec {
            id,
            input_shape: [3, 32, 32],
            layers: vec![
                conv_s2(3, 16),
                LeakyRelu(0.2),
                conv_s2(16, 32),
                LeakyRelu(0.2),
                conv_s2(32, 1),
                GlobalAvgPool,
            ],
            output_shape: vec![1],
        },
        ArchId::DLiteral => ArchitectureSpec {
            id,
            input_shape: [3, 32, 32],
            layers: vec![
                convt_s2(3, 8),
                LeakyRelu(0.2),
                convt_s2(8, 4),
                LeakyRelu(0.2),
                convt_s2(4, 1),
                GlobalAvgPool,
            ],
            output_shape: vec![1],
        },
        ArchId::FSmall => ArchitectureSpec {
            id,
            input_shape: [3, 32, 32],
            layers: vec![
                conv(3, 12),
                BatchNorm { c: 12 },
                Relu,
                MaxPool2,
                conv(12, 24),
                BatchNorm { c: 24 },
                Relu,
                MaxPool2,
                conv(24, 48),
                BatchNorm { c: 48 },
                Relu,
                MaxPool2,
                Flatten,
                Dense {
                    n_in: 48 * 4 * 4,
                    n_out: 10,
                },
            ],
            output_shape: vec![10],
        },
        ArchId::FAlexnet => ArchitectureSpec {
            id,
            input_shape: [3, 32, 32],
            layers: vec![
                conv(3, 24),
                Relu,
                MaxPool2,
                conv(24, 48),
                Relu,
                MaxPool2,
                conv(48, 64),
                Relu,
                conv(64, 48),
                Relu,
                MaxPool2,
                Flatten,
                Dense {
                    n_in: 48 * 4 * 4,
                    n_out: 128,
                },
                Relu,
                Dense {
                    n_in: 128,
                    n_out: 10,
                },
            ],
            output_shape: vec![10],
        },
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Initializes parameters for an architecture. Conv/dense weights draw from
/// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)); biases start at zero; batch
/// norm starts at identity with zero-mean/unit-var running statistics.
/// Fully determined by `seed`.
pub fn build(id: ArchId, seed: u64) -> NetworkParams {
    let arch = architecture(id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in arch.param_layout() {
        let numel: usize = shape.iter().product();
        let values = if name.ends_with(".weight") {
            let fan_in: usize = match shape.len() {
                4 => {
                    if matches!(id, ArchId::DLiteral) || is_convt_weight(&arch, &name) {
                        shape[0] * shape[2] * shape[3]
                    } else {
                        shape[1] * shape[2] * shape[3]
                    }
                }
                2 => shape[1],
                _ => unreachable!("weights are rank 2 or 4"),
            };
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new(-bound, bound).expect("valid init bound");
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            vec![1.0; numel]
        } else {
            vec![0.0; numel]
        };
        entries.push(ParamEntry {
            name,
            shape,
            values,
        });
    }
    NetworkParams {
        meta: ParamsMeta {
            arch: id.as_str().to_string(),
            seed,
            step: 0,
        },
        entries,
    }
}

fn is_convt_weight(arch: &ArchitectureSpec, name: &str) -> bool {
    let idx: usize = name
        .trim_start_matches('l')
        .split('.')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(usize::MAX);
    matches!(arch.layers.get(idx), Some(LayerSpec::ConvT { .. }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics recorded for one batch-norm layer in training mode.
pub struct BnBatch<T: Element> {
    pub running_mean_idx: usize,
    pub running_var_idx: usize,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Elements per channel in the normalized batch (N * H * W).
    pub elems: usize,
}

/// Output of binding an architecture onto a graph.
pub struct ForwardOut<T: Element> {
    pub output: Var,
    /// (entry index, graph var) for every trainable entry that was bound.
    pub bound: Vec<(usize, Var)>,
    pub bn_stats: Vec<BnBatch<T>>,
}

/// Casts checkpoint entries into tensors of the working element type, in
/// canonical order (f32 -> f64 is exact, so f64 verification sees the very
/// same parameter values training uses).
pub fn cast_params<T: Element>(params: &NetworkParams) -> Vec<Tensor<T>> {
    params
        .entries
        .iter()
        .map(|e| {
            Tensor::from_vec(
                &e.shape,
                e.values.iter().map(|&v| el::<T>(v as f64)).collect(),
            )
        })
        .collect()
}

/// Runs `arch` over `input` (shape [N, C, H, W]) on the graph. `values` are
/// the parameter tensors in canonical order. When `trainable` is set,
/// parameters are bound as gradient-carrying leaves.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    arch: &ArchitectureSpec,
    values: &[Tensor<T>],
    input: Var,
    mode: Mode,
    trainable: bool,
) -> Result<ForwardOut<T>> {
    let layout = arch.param_layout();
    if values.len() != layout.len() {
        return Err(Error::Shape {
            layer: None,
            what: format!(
                "parameter collection for {} has {} entries, architecture expects {}",
                arch.id.as_str(),
                values.len(),
                layout.len()
            ),
        });
    }
    for (v, (name, shape)) in values.iter().zip(&layout) {
        if v.shape() != &shape[..] {
            return Err(Error::Shape {
                layer: None,
                what: format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    v.shape(),
                    shape
                ),
            });
        }
    }
    let in_shape = g.value(input).shape().to_vec();
    let expect: Vec<usize> = arch.input_shape.to_vec();
    if in_shape.len() != 4 || in_shape[1..] != expect[..] {
        return Err(Error::Shape {
            layer: Some(0),
            what: format!(
                "input shape {:?} does not match architecture input [N, {}, {}, {}]",
                in_shape, expect[0], expect[1], expect[2]
            ),
        });
    }

    let bind = |g: &mut Graph<T>, idx: usize, train: bool| -> Var {
        if train {
            g.param(values[idx].clone())
        } else {
            g.input(values[idx].clone())
        }
    };

    let mut bound = Vec::new();
    let mut bn_stats = Vec::new();
    let mut cursor = 0usize;
    let mut cur = input;

    for layer in &arch.layers {
        match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let w = bind(g, cursor, trainable);
                let b = bind(g, cursor + 1, trainable);
                bound.push((cursor, w));
                bound.push((cursor + 1, b));
                cursor += 2;
                cur = g.conv2d(cur, w, b, *stride, *pad);
            }
            LayerSpec::ConvT { stride, pad, .. } => {
                let w = bind(g, cursor, trainable);
                let b = bind(g, cursor + 1, trainable);
                bound.push((cursor, w));
                bound.push((cursor + 1, b));
                cursor += 2;
                cur = g.conv_transpose2d(cur, w, b, *stride, *pad);
            }
            LayerSpec::Dense { .. } => {
                let w = bind(g, cursor, trainable);
                let b = bind(g, cursor + 1, trainable);
                bound.push((cursor, w));
                bound.push((cursor + 1, b));
                cursor += 2;
                cur = g.dense(cur, w, b);
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = bind(g, cursor, trainable);
                let beta = bind(g, cursor + 1, trainable);
                bound.push((cursor, gamma));
                bound.push((cursor + 1, beta));
                let rm_idx = cursor + 2;
                let rv_idx = cursor + 3;
                cursor += 4;
                match mode {
                    Mode::Train => {
                        let shape = g.value(cur).shape().to_vec();
                        let elems = shape[0] * shape[2] * shape[3];
                        let (v, mean, var) = g.batch_norm_train(cur, gamma, beta, el(BN_EPS));
                        bn_stats.push(BnBatch {
                            running_mean_idx: rm_idx,
                            running_var_idx: rv_idx,
                            mean,
                            var,
                            elems,
                        });
                        cur = v;
                    }
                    Mode::Eval => {
                        cur = g.batch_norm_eval(
                            cur,
                            gamma,
                            beta,
                            values[rm_idx].clone(),
                            values[rv_idx].clone(),
                            el(BN_EPS),
                        );
                    }
                }
            }
            LayerSpec::Relu => cur = g.relu(cur),
            LayerSpec::LeakyRelu(s) => cur = g.leaky_relu(cur, el(*s as f64)),
            LayerSpec::Sigmoid => cur = g.sigmoid(cur),
            LayerSpec::Tanh => cur = g.tanh(cur),
            LayerSpec::MaxPool2 => cur = g.max_pool2(cur),
            LayerSpec::GlobalAvgPool => cur = g.global_avg_pool(cur),
            LayerSpec::Flatten => cur = g.flatten(cur),
        }
    }
    Ok(ForwardOut {
        output: cur,
        bound,
        bn_stats,
    })
}

/// Folds batch statistics into the running-statistic entries after a
/// training-mode forward, in layer order. The running variance uses the
/// unbiased estimate.
pub fn update_running_stats<T: Element>(params: &mut NetworkParams, bn_stats: &[BnBatch<T>]) {
    for bn in bn_stats {
        let correction = if bn.elems > 1 {
            bn.elems as f64 / (bn.elems as f64 - 1.0)
        } else {
            1.0
        };
        let rm = &mut params.entries[bn.running_mean_idx];
        for (r, &m) in rm.values.iter_mut().zip(bn.mean.data()) {
            let m: f64 = num_traits::NumCast::from(m).unwrap();
            *r = ((1.0 - BN_MOMENTUM) * (*r as f64) + BN_MOMENTUM * m) as f32;
        }
        let rv = &mut params.entries[bn.running_var_idx];
        for (r, &v) in rv.values.iter_mut().zip(bn.var.data()) {
            let v: f64 = num_traits::NumCast::from(v).unwrap();
            *r = ((1.0 - BN_MOMENTUM) * (*r as f64) + BN_MOMENTUM * v * correction) as f32;
        }
    }
}

/// Eval-mode forward pass on a plain tensor; pure given params and input.
pub fn eval_forward(params: &NetworkParams, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    let arch = architecture(ArchId::parse(&params.meta.arch)?);
    let mut g: Graph<f32> = Graph::new();
    let x = g.input(input.clone());
    let values = cast_params::<f32>(params);
    let out = forward(&mut g, &arch, &values, x, Mode::Eval, false)?;
    Ok(g.value(out.output).clone())
}

/// Builds the 7-channel W input from typed tensors: image RGB planes
/// followed by the watermark RGBA planes, per image.
pub fn stamper_input_tensor<T: Element>(x: &Tensor<T>, w_rgba: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4);
    assert_eq!(s[1], 3);
    let (n, h, wd) = (s[0], s[2], s[3]);
    assert_eq!(w_rgba.shape(), &[4, h, wd]);
    let chw = 3 * h * wd;
    let mut data = Vec::with_capacity(n * 7 * h * wd);
    for i in 0..n {
        data.extend_from_slice(&x.data()[i * chw..(i + 1) * chw]);
        data.extend_from_slice(w_rgba.data());
    }
    Tensor::from_vec(&[n, 7, h, wd], data)
}

/// Builds the 7-channel W input: image RGB planes followed by the watermark
/// RGBA planes, per image.
pub fn stamper_input(x: &ImageBatch, w: &Watermark) -> Tensor<f32> {
    stamper_input_tensor(x.data(), &w.to_rgba_tensor())
}

/// Runs W over a batch, producing one synthesized watermark per image.
pub fn synthesize(params_w: &NetworkParams, x: &ImageBatch, w: &Watermark) -> Result<Vec<Watermark>> {
    if x.height() != w.height() || x.width() != w.width() {
        return Err(Error::dimension(format!(
            "watermark {}x{} does not match images {}x{}",
            w.height(),
            w.width(),
            x.height(),
            x.width()
        )));
    }
    let (h, wd) = (x.height(), x.width());
    let mut out = Vec::with_capacity(x.len());
    // chunked to bound activation memory on large batches
    let chunk = 128;
    let mut start = 0;
    while start < x.len() {
        let idx: Vec<usize> = (start..(start + chunk).min(x.len())).collect();
        let part = x.select(&idx);
        let input = stamper_input(&part, w);
        let y = eval_forward(params_w, &input)?;
        let chw = 4 * h * wd;
        for i in 0..part.len() {
            let plane = Tensor::from_vec(&[4, h, wd], y.data()[i * chw..(i + 1) * chw].to_vec());
            out.push(Watermark::from_rgba_tensor(&plane)?);
        }
        start += chunk;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::CIFAR_HW;

    #[test]
    fn all_architectures_validate() {
        for id in [
            ArchId::W,
            ArchId::V,
            ArchId::D,
            ArchId::DLiteral,
            ArchId::FSmall,
            ArchId::FAlexnet,
        ] {
            architecture(id).validate().unwrap();
        }
    }

    #[test]
    fn w_first_conv_weight_shape_has_seven_input_channels() {
        let p = build(ArchId::W, 0);
        assert_eq!(p.entries[0].name, "l0.weight");
        assert_eq!(p.entries[0].shape, vec![16, 7, 3, 3]);
    }

    #[test]
    fn d_output_layer_bias_is_zero() {
        let p = build(ArchId::D, 0);
        let bias = p
            .entries
            .iter()
            .filter(|e| e.name.ends_with(".bias"))
            .next_back()
            .unwrap();
        assert!(bias.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(ArchId::FSmall, 7);
        let b = build(ArchId::FSmall, 7);
        assert_eq!(a.value_bytes(), b.value_bytes());
        let c = build(ArchId::FSmall, 8);
        assert_ne!(a.value_bytes(), c.value_bytes());
    }

    #[test]
    fn zero_weight_w_outputs_half_planes() {
        let mut p = build(ArchId::W, 0);
        for e in &mut p.entries {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let input = Tensor::zeros(&[1, 7, CIFAR_HW, CIFAR_HW]);
        let out = eval_forward(&p, &input).unwrap();
        assert_eq!(out.shape(), &[1, 4, CIFAR_HW, CIFAR_HW]);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn f_small_logit_shape() {
        let p = build(ArchId::FSmall, 1);
        let input = Tensor::full(&[8, 3, CIFAR_HW, CIFAR_HW], 0.25);
        let out = eval_forward(&p, &input).unwrap();
        assert_eq!(out.shape(), &[8, 10]);
    }

    #[test]
    fn d_produces_scalar_logit() {
        for id in [ArchId::D, ArchId::DLiteral] {
            let p = build(id, 3);
            let input = Tensor::full(&[2, 3, CIFAR_HW, CIFAR_HW], 0.5);
            let out = eval_forward(&p, &input).unwrap();
            assert_eq!(out.shape(), &[2, 1], "{id:?}");
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let p = build(ArchId::FSmall, 5);
        let input = Tensor::full(&[2, 3, CIFAR_HW, CIFAR_HW], 0.3);
        let a = eval_forward(&p, &input).unwrap();
        let b = eval_forward(&p, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let p = build(ArchId::D, 0);
        let input = Tensor::zeros(&[1, 4, CIFAR_HW, CIFAR_HW]);
        match eval_forward(&p, &input) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, Some(0)),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn synthesize_shapes_and_determinism() {
        let p = build(ArchId::W, 11);
        let x = ImageBatch::new(
            Tensor::full(&[2, 3, CIFAR_HW, CIFAR_HW], 0.4),
            vec![0, 1],
        )
        .unwrap();
        let wm = Watermark::new(
            Tensor::full(&[3, CIFAR_HW, CIFAR_HW], 0.8),
            Tensor::full(&[1, CIFAR_HW, CIFAR_HW], 0.6),
        )
        .unwrap();
        let ws = synthesize(&p, &x, &wm).unwrap();
        assert_eq!(ws.len(), 2);
        // identical images -> identical synthesized watermarks
        assert_eq!(ws[0], ws[1]);
        // channel count is four by construction
        assert_eq!(ws[0].to_rgba_tensor().shape(), &[4, CIFAR_HW, CIFAR_HW]);
        // sigmoid head keeps values in range
        assert!(ws[0]
            .to_rgba_tensor()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
