//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation computes its value
//! eagerly and records what it needs for the backward pass. Nodes are only
//! created through the typed methods below, so reverse insertion order is a
//! valid topological order for backpropagation.
//!
//! The engine is generic over [`Element`]; training runs in f32, gradient
//! verification runs the identical code paths in f64.

use crate::tensor::{axpy, el, matmul_acc, matmul_nt_acc, matmul_tn_acc, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

struct Node<T: Element> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SliceChannels {
        x: Var,
        c0: usize,
        c1: usize,
    },
    AlphaBlend {
        x: Var,
        rgb: Var,
        alpha: Var,
        beta: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(T, Var)>,
    },
    SoftmaxWeightedSum {
        xs: Vec<Var>,
        tau: T,
    },
    KlToTarget {
        target: Tensor<T>,
        logits: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    MseBroadcast {
        x: Var,
        target: Tensor<T>,
    },
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

/// Row-wise stable softmax of a [N, K] tensor.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    assert_eq!(s.len(), 2);
    let (n, k) = (s[0], s[1]);
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for j in 0..k {
            let e = (row[j] - m).exp();
            out[i * k + j] = e;
            z = z + e;
        }
        for j in 0..k {
            out[i * k + j] = out[i * k + j] / z;
        }
    }
    Tensor::from_vec(s, out)
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn convt_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Unfolds one [C, H, W] image into a [C*k*k, OH*OW] column matrix.
fn im2col<T: Element>(
    img: &[T],
    col: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // zero prefix, contiguous copy, zero suffix
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        drow[..lo.min(ow)].fill(T::zero());
                        if lo < hi {
                            drow[lo..hi].copy_from_slice(
                                &src[(lo as isize + shift) as usize
                                    ..(hi as isize + shift) as usize],
                            );
                        }
                        drow[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one image into the transposed layout [OH*OW, C*k*k]; the
/// weight-gradient matmul then walks contiguous rows.
fn im2row<T: Element>(
    img: &[T],
    rows: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let kk = c * k * k;
    rows[..oh * ow * kk].fill(T::zero());
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut rows[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src_at = iy as usize * w + ix as usize;
                    for ci in 0..c {
                        dst[(ci * k + ky) * k + kx] = img[ci * h * w + src_at];
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into one [C, H, W] image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Element>(
    col: &[T],
    img: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let d = &mut dst[(lo as isize + shift) as usize
                                ..(hi as isize + shift) as usize];
                            for (dv, &sv) in d.iter_mut().zip(&srow[lo..hi]) {
                                *dv = *dv + sv;
                            }
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [CO,CI,K,K]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernels are square");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let ohw = oh * ow;
        let kk = c * k * k;

        let mut out = vec![T::zero(); n * co * ohw];
        let mut col = vec![T::zero(); kk * ohw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let chw = c * h * wd;
            for ni in 0..n {
                im2col(
                    &xv[ni * chw..(ni + 1) * chw],
                    &mut col,
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                let dst = &mut out[ni * co * ohw..(ni + 1) * co * ohw];
                matmul_acc(dst, wv, &col, co, kk, ohw);
                for coi in 0..co {
                    let bias = bv[coi];
                    for v in &mut dst[coi * ohw..(coi + 1) * ohw] {
                        *v = *v + bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[n, co, oh, ow], out),
            needs,
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [CI,CO,K,K]");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let oh = convt_out_size(h, k, stride, pad);
        let ow = convt_out_size(wd, k, stride, pad);

        let mut out = vec![T::zero(); n * co * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for ni in 0..n {
                let xin = &xv[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                let dst = &mut out[ni * co * oh * ow..(ni + 1) * co * oh * ow];
                for coi in 0..co {
                    let bias = bv[coi];
                    for v in &mut dst[coi * oh * ow..(coi + 1) * oh * ow] {
                        *v = *v + bias;
                    }
                }
                for cii in 0..ci {
                    let plane = &xin[cii * h * wd..(cii + 1) * h * wd];
                    for coi in 0..co {
                        let ker = &wv[(cii * co + coi) * k * k..(cii * co + coi + 1) * k * k];
                        let oplane = &mut dst[coi * oh * ow..(coi + 1) * oh * ow];
                        for iy in 0..h {
                            for ix in 0..wd {
                                let v = plane[iy * wd + ix];
                                for ky in 0..k {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ox = (ix * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let at = oy as usize * ow + ox as usize;
                                        oplane[at] = v.mul_add(ker[ky * k + kx], oplane[at]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[n, co, oh, ow], out),
            needs,
            Op::ConvT2d { x, w, b, stride, pad },
        )
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "dense input must be [N,F]");
        assert_eq!(ws.len(), 2, "dense weight must be [O,F]");
        assert_eq!(xs[1], ws[1], "dense feature mismatch");
        let (n, f) = (xs[0], xs[1]);
        let o = ws[0];
        let mut out = vec![T::zero(); n * o];
        matmul_nt_acc(&mut out, self.value(x).data(), self.value(w).data(), n, o, f);
        let bv = self.value(b).data();
        for ni in 0..n {
            for (oi, v) in out[ni * o..(ni + 1) * o].iter_mut().enumerate() {
                *v = *v + bv[oi];
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[n, o], out), needs, Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let needs = self.needs(x);
        self.push(v, needs, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { slope * a });
        let needs = self.needs(x);
        self.push(v, needs, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid_scalar);
        let needs = self.needs(x);
        self.push(v, needs, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let needs = self.needs(x);
        self.push(v, needs, Op::Tanh { x })
    }

    /// Batch-statistics normalization (training mode). Returns the node and
    /// the per-channel batch mean / biased variance so the caller can update
    /// running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Tensor<T>, Tensor<T>) {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "batch norm input must be [N,C,H,W]");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = el::<T>((n * h * w) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        {
            let xv = self.value(x).data();
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for &v in plane {
                        acc = acc + v;
                    }
                }
                let mu = acc / m;
                mean[ci] = mu;
                let mut vacc = T::zero();
                for ni in 0..n {
                    let plane = &xv[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for &v in plane {
                        let d = v - mu;
                        vacc = d.mul_add(d, vacc);
                    }
                }
                var[ci] = vacc / m;
            }
        }
        let mean_t = Tensor::from_vec(&[c], mean);
        let var_t = Tensor::from_vec(&[c], var);
        let v = self.bn_forward(x, gamma, beta, &mean_t, &var_t, eps, true);
        (v, mean_t, var_t)
    }

    /// Running-statistics normalization (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: T,
    ) -> Var {
        self.bn_forward(x, gamma, beta, &running_mean, &running_var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_forward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
        batch_stats: bool,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = vec![T::zero(); n * c * h * w];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            for ci in 0..c {
                let istd = T::one() / (var.data()[ci] + eps).sqrt();
                let scale = gv[ci] * istd;
                let shift = bv[ci] - mean.data()[ci] * scale;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for j in 0..h * w {
                        out[base + j] = xv[base + j].mul_add(scale, shift);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_vec(&xs, out),
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
                batch_stats,
            },
        )
    }

    /// 2x2 max pooling with stride 2; requires even spatial dims. Ties pick
    /// the first element in scan order, so pooling is deterministic.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 requires even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = self.value(x).data();
            for pi in 0..n * c {
                let plane = &xv[pi * h * w..(pi + 1) * h * w];
                let obase = pi * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_at = (2 * oy) * w + 2 * ox;
                        let mut best = plane[best_at];
                        for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                            let at = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                        out[obase + oy * ow + ox] = best;
                        argmax[obase + oy * ow + ox] = (pi * h * w + best_at) as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            needs,
            Op::MaxPool2 { x, argmax },
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = T::one() / el::<T>((h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        {
            let xv = self.value(x).data();
            for pi in 0..n * c {
                let mut acc = T::zero();
                for &v in &xv[pi * h * w..(pi + 1) * h * w] {
                    acc = acc + v;
                }
                out[pi] = acc * inv;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c], out), needs, Op::GlobalAvgPool { x })
    }

    /// Flattens [N, ...] to [N, prod(...)]. Data is shared layout-wise.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let v = self.value(x).clone().reshaped(&[n, rest]);
        let needs = self.needs(x);
        self.push(v, needs, Op::Reshape { x })
    }

    /// Channel slice [c0, c1) of a [N, C, H, W] tensor.
    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(c0 < c1 && c1 <= c);
        let cs = c1 - c0;
        let mut out = vec![T::zero(); n * cs * h * w];
        {
            let xv = self.value(x).data();
            for ni in 0..n {
                let src = &xv[(ni * c + c0) * h * w..(ni * c + c1) * h * w];
                out[ni * cs * h * w..(ni + 1) * cs * h * w].copy_from_slice(src);
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[n, cs, h, w], out),
            needs,
            Op::SliceChannels { x, c0, c1 },
        )
    }

    /// Watermark compositing: out = (1 - beta*alpha) * x + beta*alpha * rgb,
    /// alpha broadcast over the three color channels.
    pub fn alpha_blend(&mut self, x: Var, rgb: Var, alpha: Var, beta: T) -> Var {
        let xs = self.value(x).shape().to_vec();
        let rs = self.value(rgb).shape().to_vec();
        let als = self.value(alpha).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(xs, rs, "alpha_blend rgb shape mismatch");
        assert_eq!(als, vec![xs[0], 1, xs[2], xs[3]], "alpha_blend alpha shape");
        assert_eq!(xs[1], 3);
        let (n, _, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let mut out = vec![T::zero(); n * 3 * hw];
        {
            let xv = self.value(x).data();
            let rv = self.value(rgb).data();
            let av = self.value(alpha).data();
            for ni in 0..n {
                let a = &av[ni * hw..(ni + 1) * hw];
                for c in 0..3 {
                    let base = (ni * 3 + c) * hw;
                    for j in 0..hw {
                        let m = beta * a[j];
                        out[base + j] = (T::one() - m) * xv[base + j] + m * rv[base + j];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(rgb) || self.needs(alpha);
        self.push(
            Tensor::from_vec(&xs, out),
            needs,
            Op::AlphaBlend { x, rgb, alpha, beta },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Mul { a, b })
    }

    /// Linear combination sum_i c_i * v_i of same-shape tensors.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].1).shape().to_vec();
        let mut out = vec![T::zero(); shape.iter().product()];
        for &(c, v) in terms {
            assert_eq!(self.value(v).shape(), &shape[..]);
            axpy(&mut out, c, self.value(v).data());
        }
        let needs = terms.iter().any(|&(_, v)| self.needs(v));
        self.push(
            Tensor::from_vec(&shape, out),
            needs,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Softmax-weighted aggregation of scalar losses with temperature `tau`:
    /// tau -> inf approaches the mean, tau -> 0 approaches the max.
    pub fn softmax_weighted_sum(&mut self, xs: &[Var], tau: T) -> Var {
        assert!(!xs.is_empty());
        assert!(tau > T::zero(), "temperature must be positive");
        let vals: Vec<T> = xs.iter().map(|&v| self.value(v).item()).collect();
        let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        let mut weights = Vec::with_capacity(vals.len());
        for &g in &vals {
            let e = ((g - m) / tau).exp();
            weights.push(e);
            z = z + e;
        }
        let mut agg = T::zero();
        for (w, &g) in weights.iter_mut().zip(&vals) {
            *w = *w / z;
            agg = g.mul_add(*w, agg);
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::scalar(agg),
            needs,
            Op::SoftmaxWeightedSum { xs: xs.to_vec(), tau },
        )
    }

    /// Mean KL divergence KL(target || softmax(logits)) over the batch.
    /// `target` rows must be probability distributions.
    pub fn kl_to_target(&mut self, target: Tensor<T>, logits: Var) -> Var {
        let s = self.value(logits).shape().to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(target.shape(), &s[..]);
        let (n, k) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &x in row {
                z = z + (x - m).exp();
            }
            let lse = m + z.ln();
            for j in 0..k {
                let p = target.data()[i * k + j];
                if p > T::zero() {
                    let logq = row[j] - lse;
                    total = total + p * (p.ln() - logq);
                }
            }
        }
        let v = total / el::<T>(n as f64);
        let needs = self.needs(logits);
        self.push(Tensor::scalar(v), needs, Op::KlToTarget { target, logits })
    }

    /// Mean cross-entropy of logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Var {
        let s = self.value(logits).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n);
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &x in row {
                z = z + (x - m).exp();
            }
            let lse = m + z.ln();
            total = total + (lse - row[labels[i] as usize]);
        }
        let v = total / el::<T>(n as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(v),
            needs,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy with logits against a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Var {
        let n = self.value(logits).numel();
        self.bce_with_logits_targets(logits, vec![target; n])
    }

    /// Mean binary cross-entropy with logits against per-sample targets.
    pub fn bce_with_logits_targets(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let n = self.value(logits).numel();
        assert_eq!(targets.len(), n, "one target per logit");
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (&z, &t) in lv.iter().zip(&targets) {
            total = total + softplus_scalar(z) - t * z;
        }
        let v = total / el::<T>(n as f64);
        let needs = self.needs(logits);
        self.push(Tensor::scalar(v), needs, Op::BceWithLogits { logits, targets })
    }

    /// Mean squared error of x against a target broadcast over the batch
    /// dimension: mean over all elements of (x[n] - target)^2.
    pub fn mse_broadcast(&mut self, x: Var, target: Tensor<T>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let per = target.numel();
        assert_eq!(&xs[1..].iter().product::<usize>(), &per, "mse target shape");
        let n = xs[0];
        let xv = self.value(x).data();
        let mut total = T::zero();
        for ni in 0..n {
            let row = &xv[ni * per..(ni + 1) * per];
            for (j, &v) in row.iter().enumerate() {
                let d = v - target.data()[j];
                total = d.mul_add(d, total);
            }
        }
        let v = total / el::<T>((n * per) as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), needs, Op::MseBroadcast { x, target })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(t) => {
                debug_assert_eq!(t.shape(), delta.shape());
                for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagates from a scalar loss node. Returns per-node gradients;
    /// only nodes on a grad-requiring path have entries.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&mut grads, &g, Var(id), *x, *w, *b, *stride, *pad);
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    self.convt2d_backward(&mut grads, &g, *x, *w, *b, *stride, *pad);
                }
                Op::Dense { x, w, b } => {
                    let xs = self.value(*x).shape().to_vec();
                    let ws = self.value(*w).shape().to_vec();
                    let (n, f) = (xs[0], xs[1]);
                    let o = ws[0];
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n * f];
                        matmul_acc(&mut dx, g.data(), self.value(*w).data(), n, o, f);
                        Self::accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); o * f];
                        matmul_tn_acc(&mut dw, g.data(), self.value(*x).data(), n, o, f);
                        Self::accumulate(&mut grads, *w, Tensor::from_vec(&ws, dw));
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for ni in 0..n {
                            for oi in 0..o {
                                db[oi] = db[oi] + g.data()[ni * o + oi];
                            }
                        }
                        Self::accumulate(&mut grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
                Op::Relu { x } => {
                    let dx = Tensor::from_vec(
                        g.shape(),
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let dx = Tensor::from_vec(
                        g.shape(),
                        self.value(*x)
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| if xv > T::zero() { gv } else { s * gv })
                            .collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = self.value(Var(id));
                    let dx = Tensor::from_vec(
                        g.shape(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                            .collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Tanh { x } => {
                    let y = self.value(Var(id));
                    let dx = Tensor::from_vec(
                        g.shape(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                            .collect(),
                    );
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    batch_stats,
                } => {
                    self.batch_norm_backward(
                        &mut grads,
                        &g,
                        *x,
                        *gamma,
                        *beta,
                        mean,
                        var,
                        *eps,
                        *batch_stats,
                    );
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (j, &src) in argmax.iter().enumerate() {
                        dx[src as usize] = dx[src as usize] + g.data()[j];
                    }
                    Self::accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.value(*x).shape(), dx),
                    );
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (_, _, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = T::one() / el::<T>((h * w) as f64);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (pi, chunk) in dx.chunks_exact_mut(h * w).enumerate() {
                        let gv = g.data()[pi] * inv;
                        chunk.fill(gv);
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx));
                }
                Op::Reshape { x } => {
                    let dx = g.clone().reshaped(self.value(*x).shape());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::SliceChannels { x, c0, c1 } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let cs = c1 - c0;
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for ni in 0..n {
                        let dst = &mut dx[(ni * c + c0) * h * w..(ni * c + c1) * h * w];
                        dst.copy_from_slice(&g.data()[ni * cs * h * w..(ni + 1) * cs * h * w]);
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx));
                }
                Op::AlphaBlend { x, rgb, alpha, beta } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, _, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let hw = h * w;
                    let av = self.value(*alpha).data();
                    let b = *beta;
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n * 3 * hw];
                        for ni in 0..n {
                            let a = &av[ni * hw..(ni + 1) * hw];
                            for c in 0..3 {
                                let base = (ni * 3 + c) * hw;
                                for j in 0..hw {
                                    dx[base + j] = g.data()[base + j] * (T::one() - b * a[j]);
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx));
                    }
                    if self.needs(*rgb) {
                        let mut dr = vec![T::zero(); n * 3 * hw];
                        for ni in 0..n {
                            let a = &av[ni * hw..(ni + 1) * hw];
                            for c in 0..3 {
                                let base = (ni * 3 + c) * hw;
                                for j in 0..hw {
                                    dr[base + j] = g.data()[base + j] * b * a[j];
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *rgb, Tensor::from_vec(&xs, dr));
                    }
                    if self.needs(*alpha) {
                        let xv = self.value(*x).data();
                        let rv = self.value(*rgb).data();
                        let mut da = vec![T::zero(); n * hw];
                        for ni in 0..n {
                            for c in 0..3 {
                                let base = (ni * 3 + c) * hw;
                                for j in 0..hw {
                                    let diff = rv[base + j] - xv[base + j];
                                    da[ni * hw + j] =
                                        (g.data()[base + j] * b).mul_add(diff, da[ni * hw + j]);
                                }
                            }
                        }
                        Self::accumulate(
                            &mut grads,
                            *alpha,
                            Tensor::from_vec(&[n, 1, h, w], da),
                        );
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let da = Tensor::from_vec(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(self.value(*b).data())
                                .map(|(&gv, &bv)| gv * bv)
                                .collect(),
                        );
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = Tensor::from_vec(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(self.value(*a).data())
                                .map(|(&gv, &av)| gv * av)
                                .collect(),
                        );
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(c, v) in terms {
                        if self.needs(v) {
                            Self::accumulate(&mut grads, v, g.map(|gv| gv * c));
                        }
                    }
                }
                Op::SoftmaxWeightedSum { xs, tau } => {
                    let vals: Vec<T> = xs.iter().map(|&v| self.value(v).item()).collect();
                    let agg = self.value(Var(id)).item();
                    let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    let mut ws: Vec<T> = vals.iter().map(|&v| ((v - m) / *tau).exp()).collect();
                    for &w in &ws {
                        z = z + w;
                    }
                    for w in &mut ws {
                        *w = *w / z;
                    }
                    let gs = g.item();
                    for (i, &v) in xs.iter().enumerate() {
                        if self.needs(v) {
                            let d = ws[i] * (T::one() + (vals[i] - agg) / *tau);
                            Self::accumulate(&mut grads, v, Tensor::scalar(gs * d));
                        }
                    }
                }
                Op::KlToTarget { target, logits } => {
                    let s = self.value(*logits).shape().to_vec();
                    let (n, k) = (s[0], s[1]);
                    let q = softmax_rows(self.value(*logits));
                    let inv_n = T::one() / el::<T>(n as f64);
                    let gs = g.item();
                    let dl: Vec<T> = q
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&qv, &pv)| gs * (qv - pv) * inv_n)
                        .collect();
                    let _ = k;
                    Self::accumulate(&mut grads, *logits, Tensor::from_vec(&s, dl));
                }
                Op::CrossEntropy { logits, labels } => {
                    let s = self.value(*logits).shape().to_vec();
                    let (n, k) = (s[0], s[1]);
                    let mut dl = softmax_rows(self.value(*logits)).into_data();
                    let inv_n = T::one() / el::<T>(n as f64);
                    let gs = g.item();
                    for i in 0..n {
                        dl[i * k + labels[i] as usize] =
                            dl[i * k + labels[i] as usize] - T::one();
                    }
                    for v in &mut dl {
                        *v = *v * inv_n * gs;
                    }
                    Self::accumulate(&mut grads, *logits, Tensor::from_vec(&s, dl));
                }
                Op::BceWithLogits { logits, targets } => {
                    let s = self.value(*logits).shape().to_vec();
                    let n = self.value(*logits).numel();
                    let inv_n = T::one() / el::<T>(n as f64);
                    let gs = g.item();
                    let dl: Vec<T> = self
                        .value(*logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| gs * (sigmoid_scalar(z) - t) * inv_n)
                        .collect();
                    Self::accumulate(&mut grads, *logits, Tensor::from_vec(&s, dl));
                }
                Op::MseBroadcast { x, target } => {
                    let xs = self.value(*x).shape().to_vec();
                    let per = target.numel();
                    let n = xs[0];
                    let scale = g.item() * el::<T>(2.0) / el::<T>((n * per) as f64);
                    let xv = self.value(*x).data();
                    let mut dx = vec![T::zero(); n * per];
                    for ni in 0..n {
                        for j in 0..per {
                            dx[ni * per + j] =
                                scale * (xv[ni * per + j] - target.data()[j]);
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(&xs, dx));
                }
            }
        }
        Gradients { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        _out: Var,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let gs = g.shape();
        let (oh, ow) = (gs[2], gs[3]);
        let ohw = oh * ow;
        let kk = c * k * k;
        let chw = c * h * wd;

        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = self.needs(b);

        let mut dw = if need_w { vec![T::zero(); co * kk] } else { Vec::new() };
        let mut dx = if need_x { vec![T::zero(); n * chw] } else { Vec::new() };
        let mut rows = if need_w { vec![T::zero(); ohw * kk] } else { Vec::new() };
        let mut col = if need_x { vec![T::zero(); kk * ohw] } else { Vec::new() };
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        for ni in 0..n {
            let gslice = &g.data()[ni * co * ohw..(ni + 1) * co * ohw];
            if need_w {
                im2row(
                    &xv[ni * chw..(ni + 1) * chw],
                    &mut rows,
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                // dW[co x KK] += dOut[co x OHW] . rows[OHW x KK]
                matmul_acc(&mut dw, gslice, &rows, co, ohw, kk);
            }
            if need_x {
                col.fill(T::zero());
                matmul_tn_acc(&mut col, wv, gslice, co, kk, ohw);
                col2im_acc(
                    &col,
                    &mut dx[ni * chw..(ni + 1) * chw],
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                );
            }
        }
        if need_w {
            Self::accumulate(grads, w, Tensor::from_vec(&ws, dw));
        }
        if need_x {
            Self::accumulate(grads, x, Tensor::from_vec(&xs, dx));
        }
        if need_b {
            let mut db = vec![T::zero(); co];
            for ni in 0..n {
                for coi in 0..co {
                    let base = (ni * co + coi) * ohw;
                    let mut acc = T::zero();
                    for &gv in &g.data()[base..base + ohw] {
                        acc = acc + gv;
                    }
                    db[coi] = db[coi] + acc;
                }
            }
            Self::accumulate(grads, b, Tensor::from_vec(&[co], db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn convt2d_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let gs = g.shape();
        let (oh, ow) = (gs[2], gs[3]);

        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = self.needs(b);

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dx = if need_x { vec![T::zero(); n * ci * h * wd] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); ws.iter().product()] } else { Vec::new() };

        for ni in 0..n {
            let gimg = &g.data()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
            let ximg = &xv[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            for cii in 0..ci {
                for coi in 0..co {
                    let kbase = (cii * co + coi) * k * k;
                    let gplane = &gimg[coi * oh * ow..(coi + 1) * oh * ow];
                    let xplane = &ximg[cii * h * wd..(cii + 1) * h * wd];
                    for iy in 0..h {
                        for ix in 0..wd {
                            let xval = xplane[iy * wd + ix];
                            let mut dxa = T::zero();
                            for ky in 0..k {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    let gv = gplane[oy as usize * ow + ox as usize];
                                    if need_x {
                                        dxa = gv.mul_add(wv[kbase + ky * k + kx], dxa);
                                    }
                                    if need_w {
                                        let at = kbase + ky * k + kx;
                                        dw[at] = gv.mul_add(xval, dw[at]);
                                    }
                                }
                            }
                            if need_x {
                                let at = (ni * ci + cii) * h * wd + iy * wd + ix;
                                dx[at] = dx[at] + dxa;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            Self::accumulate(grads, x, Tensor::from_vec(&xs, dx));
        }
        if need_w {
            Self::accumulate(grads, w, Tensor::from_vec(&ws, dw));
        }
        if need_b {
            let mut db = vec![T::zero(); co];
            for ni in 0..n {
                for coi in 0..co {
                    let base = (ni * co + coi) * oh * ow;
                    let mut acc = T::zero();
                    for &gv in &g.data()[base..base + oh * ow] {
                        acc = acc + gv;
                    }
                    db[coi] = db[coi] + acc;
                }
            }
            Self::accumulate(grads, b, Tensor::from_vec(&[co], db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
        batch_stats: bool,
    ) {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = el::<T>((n * h * w) as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let need_x = self.needs(x);
        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };

        for ci in 0..c {
            let mu = mean.data()[ci];
            let istd = T::one() / (var.data()[ci] + eps).sqrt();
            // reductions: sum(dy) and sum(dy * x_hat)
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for j in 0..h * w {
                    let dy = g.data()[base + j];
                    let xhat = (xv[base + j] - mu) * istd;
                    sum_dy = sum_dy + dy;
                    sum_dy_xhat = dy.mul_add(xhat, sum_dy_xhat);
                }
            }
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            if need_x {
                let scale = gv[ci] * istd;
                if batch_stats {
                    let mean_dy = sum_dy / m;
                    let mean_dy_xhat = sum_dy_xhat / m;
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for j in 0..h * w {
                            let dy = g.data()[base + j];
                            let xhat = (xv[base + j] - mu) * istd;
                            dx[base + j] =
                                scale * (dy - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for j in 0..h * w {
                            dx[base + j] = g.data()[base + j] * scale;
                        }
                    }
                }
            }
        }
        if need_x {
            Self::accumulate(grads, x, Tensor::from_vec(&xs, dx));
        }
        if self.needs(gamma) {
            Self::accumulate(grads, gamma, Tensor::from_vec(&[c], dgamma));
        }
        if self.needs(beta) {
            Self::accumulate(grads, beta, Tensor::from_vec(&[c], dbeta));
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
