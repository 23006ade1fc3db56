//! Loss terms and the shared graph builders used by both the training loops
//! and the finite-difference gradient checks. The builders are generic over
//! the element type so the same construction runs in f32 for training and in
//! f64 for verification.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::dataio::{ImageBatch, NetworkParams, Watermark};
use crate::error::{Error, Result};
use crate::nets::{architecture, cast_params, forward, stamper_input_tensor, ArchId, Mode};
use crate::tensor::{Element, Tensor};

/// How the task loss compares predictions on clean vs stamped data: soft
/// label matching (KL on softmax outputs) or cross-entropy against the hard
/// predictions on clean data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LfMode {
    #[default]
    Kl,
    Hard,
}

/// Per-term loss weights; the default (1, 1, 1) is the plain unweighted sum.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_f: f32,
    pub lambda_v: f32,
    pub lambda_d: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_f: 1.0,
            lambda_v: 1.0,
            lambda_d: 1.0,
        }
    }
}

/// One step's loss components.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_f: f32,
    pub l_v: f32,
    pub l_d: f32,
    pub l_tot: f32,
}

/// Exact unweighted sum of the three components. Rejects non-finite inputs
/// so a diverging run aborts instead of training on garbage.
pub fn total_loss(l_f: f32, l_v: f32, l_d: f32) -> Result<f32> {
    for (name, v) in [("l_f", l_f), ("l_v", l_v), ("l_d", l_d)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                what: format!("loss component {name} is {v}"),
                last_checkpoint: None,
            });
        }
    }
    Ok(l_f + l_v + l_d)
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best as u8);
    }
    out
}

/// Everything needed to build the stamper objective on a graph.
pub struct StamperGraphCfg<'a, T: Element> {
    pub w_values: &'a [Tensor<T>],
    pub v_values: &'a [Tensor<T>],
    pub f_values: &'a [Tensor<T>],
    pub f_arch: ArchId,
    pub d_values: &'a [Vec<Tensor<T>>],
    pub d_arch: ArchId,
    pub beta: T,
    pub weights: (T, T, T),
    pub tau: T,
    pub lf_mode: LfMode,
    pub train_w: bool,
    pub train_v: bool,
}

/// The assembled stamper objective. `l_d` is the generator-side aggregate of
/// the per-discriminator losses; the discriminator-side loss lives in
/// [`build_disc_graph`].
pub struct StamperGraph<T: Element> {
    pub g: Graph<T>,
    pub wprime: Var,
    pub x_stamped: Var,
    pub l_f: Var,
    pub l_v: Var,
    pub l_d: Var,
    pub g_losses: Vec<Var>,
    pub l_tot: Var,
    /// (entry index, var) pairs for W and V when bound trainable.
    pub w_bound: Vec<(usize, Var)>,
    pub v_bound: Vec<(usize, Var)>,
}

/// Builds the full objective: synthesize w' = W(x, w), stamp x with w',
/// compare F's predictions on clean vs stamped, reconstruct w from w' with V,
/// and fool every discriminator on the stamped batch.
pub fn build_stamper_graph<T: Element>(
    x: &Tensor<T>,
    w_rgba: &Tensor<T>,
    cfg: &StamperGraphCfg<'_, T>,
) -> Result<StamperGraph<T>> {
    let w_arch = architecture(ArchId::W);
    let v_arch = architecture(ArchId::V);
    let f_arch = architecture(cfg.f_arch);
    let d_arch = architecture(cfg.d_arch);

    let mut g: Graph<T> = Graph::new();
    let input7 = {
        let t = stamper_input_tensor(x, w_rgba);
        g.input(t)
    };
    let wfw = forward(&mut g, &w_arch, cfg.w_values, input7, Mode::Eval, cfg.train_w)?;
    let wprime = wfw.output;

    let rgb = g.slice_channels(wprime, 0, 3);
    let alpha = g.slice_channels(wprime, 3, 4);
    let x_in = g.input(x.clone());
    let x_stamped = g.alpha_blend(x_in, rgb, alpha, cfg.beta);

    // task loss: frozen F on clean data provides the target distribution
    let clean_out = forward(&mut g, &f_arch, cfg.f_values, x_in, Mode::Eval, false)?;
    let clean_logits = g.value(clean_out.output).clone();
    let stamped_out = forward(&mut g, &f_arch, cfg.f_values, x_stamped, Mode::Eval, false)?;
    let l_f = match cfg.lf_mode {
        LfMode::Kl => {
            let target = softmax_rows(&clean_logits);
            g.kl_to_target(target, stamped_out.output)
        }
        LfMode::Hard => {
            let labels = argmax_rows(&clean_logits);
            g.cross_entropy(stamped_out.output, &labels)
        }
    };

    // watermark-appearance loss: V reconstructs the original watermark
    let vfw = forward(&mut g, &v_arch, cfg.v_values, wprime, Mode::Eval, cfg.train_v)?;
    let l_v = g.mse_broadcast(vfw.output, w_rgba.clone());

    // adversarial loss: every discriminator should score the stamped batch
    // as statically watermarked
    let mut g_losses = Vec::with_capacity(cfg.d_values.len());
    for dv in cfg.d_values {
        let dfw = forward(&mut g, &d_arch, dv, x_stamped, Mode::Eval, false)?;
        g_losses.push(g.bce_with_logits(dfw.output, T::one()));
    }
    let l_d = g.softmax_weighted_sum(&g_losses, cfg.tau);

    let (lf_w, lv_w, ld_w) = cfg.weights;
    let l_tot = g.weighted_sum(&[(lf_w, l_f), (lv_w, l_v), (ld_w, l_d)]);

    Ok(StamperGraph {
        g,
        wprime,
        x_stamped,
        l_f,
        l_v,
        l_d,
        g_losses,
        l_tot,
        w_bound: wfw.bound,
        v_bound: vfw.bound,
    })
}

/// Discriminator-side objective on one batch pair: statically watermarked
/// images are the positive class, synthesized ones the negative class. Both
/// halves run as one concatenated forward pass so each parameter binds once.
pub struct DiscGraph<T: Element> {
    pub g: Graph<T>,
    pub d_loss: Var,
    pub d_bound: Vec<(usize, Var)>,
}

pub fn build_disc_graph<T: Element>(
    x_w: &Tensor<T>,
    x_wp: &Tensor<T>,
    d_arch: ArchId,
    d_values: &[Tensor<T>],
    trainable: bool,
) -> Result<DiscGraph<T>> {
    assert_eq!(x_w.shape(), x_wp.shape(), "paired batches must match");
    let arch = architecture(d_arch);
    let n = x_w.shape()[0];
    let mut data = Vec::with_capacity(2 * x_w.numel());
    data.extend_from_slice(x_w.data());
    data.extend_from_slice(x_wp.data());
    let mut shape = x_w.shape().to_vec();
    shape[0] = 2 * n;

    let mut g: Graph<T> = Graph::new();
    let xcat = g.input(Tensor::from_vec(&shape, data));
    let dfw = forward(&mut g, &arch, d_values, xcat, Mode::Eval, trainable)?;
    let mut targets = vec![T::one(); n];
    targets.extend(std::iter::repeat(T::zero()).take(n));
    let d_loss = g.bce_with_logits_targets(dfw.output, targets);
    Ok(DiscGraph {
        g,
        d_loss,
        d_bound: dfw.bound,
    })
}

fn batch_tensor<T: Element>(x: &ImageBatch) -> Tensor<T> {
    x.data().cast()
}

/// Task loss between F's predictions on clean and stamped data (mean KL of
/// softmax outputs, or cross-entropy against hard clean predictions).
/// F's parameters receive no gradient; this is an evaluation entry point.
pub fn loss_f(
    params_f: &NetworkParams,
    x: &ImageBatch,
    x_stamped: &ImageBatch,
    mode: LfMode,
) -> Result<f32> {
    if x.len() != x_stamped.len() || x.data().shape() != x_stamped.data().shape() {
        return Err(Error::dimension(format!(
            "clean {:?} and stamped {:?} batches must match",
            x.data().shape(),
            x_stamped.data().shape()
        )));
    }
    let arch = architecture(ArchId::parse(&params_f.meta.arch)?);
    let values = cast_params::<f32>(params_f);
    let mut g: Graph<f32> = Graph::new();
    let xc = g.input(batch_tensor(x));
    let xs = g.input(batch_tensor(x_stamped));
    let clean = forward(&mut g, &arch, &values, xc, Mode::Eval, false)?;
    let stamped = forward(&mut g, &arch, &values, xs, Mode::Eval, false)?;
    let clean_logits = g.value(clean.output).clone();
    let l = match mode {
        LfMode::Kl => {
            let target = softmax_rows(&clean_logits);
            g.kl_to_target(target, stamped.output)
        }
        LfMode::Hard => {
            let labels = argmax_rows(&clean_logits);
            g.cross_entropy(stamped.output, &labels)
        }
    };
    Ok(g.value(l).item())
}

/// Stacks per-image watermarks into a [N, 4, H, W] tensor.
pub fn stack_watermarks(wms: &[Watermark]) -> Result<Tensor<f32>> {
    let first = wms
        .first()
        .ok_or_else(|| Error::dimension("empty watermark batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(wms.len() * 4 * h * w);
    for wm in wms {
        if wm.height() != h || wm.width() != w {
            return Err(Error::dimension("mixed watermark geometry in batch"));
        }
        data.extend_from_slice(wm.to_rgba_tensor().data());
    }
    Ok(Tensor::from_vec(&[wms.len(), 4, h, w], data))
}

/// Mean per-element squared distance between reconstructions and the
/// original watermark. Exposed so tests can drive it with an identity
/// reconstruction in place of V.
pub fn loss_v_given_recon(recon: &Tensor<f32>, w: &Watermark) -> f32 {
    let target = w.to_rgba_tensor();
    let per = target.numel();
    let n = recon.shape()[0];
    assert_eq!(recon.numel(), n * per);
    let mut total = 0.0f64;
    for ni in 0..n {
        for (j, &v) in recon.data()[ni * per..(ni + 1) * per].iter().enumerate() {
            let d = (v - target.data()[j]) as f64;
            total += d * d;
        }
    }
    (total / (n * per) as f64) as f32
}

/// Watermark-appearance loss: runs V over the synthesized watermarks and
/// compares the reconstructions against the original watermark.
pub fn loss_v(params_v: &NetworkParams, w: &Watermark, wprime: &[Watermark]) -> Result<f32> {
    let arch = architecture(ArchId::parse(&params_v.meta.arch)?);
    let values = cast_params::<f32>(params_v);
    let stack = stack_watermarks(wprime)?;
    let mut g: Graph<f32> = Graph::new();
    let input = g.input(stack);
    let out = forward(&mut g, &arch, &values, input, Mode::Eval, false)?;
    let l = g.mse_broadcast(out.output, w.to_rgba_tensor());
    Ok(g.value(l).item())
}

/// Discriminator loss pair on a batch: (d_loss, g_loss). `d_loss` is the
/// mean BCE separating statically watermarked from synthesized batches and
/// drives D's update; `g_loss` is the non-saturating generator objective
/// (stamped batch scored against the positive class) and is the term that
/// enters the total objective.
pub fn loss_d(
    params_d: &NetworkParams,
    x_w: &ImageBatch,
    x_wp: &ImageBatch,
) -> Result<(f32, f32)> {
    if x_w.len() != x_wp.len() {
        return Err(Error::dimension(format!(
            "batch sizes differ: {} vs {}",
            x_w.len(),
            x_wp.len()
        )));
    }
    let arch_id = ArchId::parse(&params_d.meta.arch)?;
    let values = cast_params::<f32>(params_d);
    let dg = build_disc_graph(
        &batch_tensor::<f32>(x_w),
        &batch_tensor::<f32>(x_wp),
        arch_id,
        &values,
        false,
    )?;
    let d_loss = dg.g.value(dg.d_loss).item();

    let arch = architecture(arch_id);
    let mut g: Graph<f32> = Graph::new();
    let xs = g.input(batch_tensor(x_wp));
    let out = forward(&mut g, &arch, &values, xs, Mode::Eval, false)?;
    let gl = g.bce_with_logits(out.output, 1.0);
    Ok((d_loss, g.value(gl).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build;

    fn flat_batch(n: usize, v: f32) -> ImageBatch {
        ImageBatch::new(Tensor::full(&[n, 3, 32, 32], v), vec![0; n]).unwrap()
    }

    #[test]
    fn loss_f_zero_on_identical_inputs() {
        let f = build(ArchId::FSmall, 3);
        let x = flat_batch(4, 0.4);
        for mode in [LfMode::Kl, LfMode::Hard] {
            let l = loss_f(&f, &x, &x, mode).unwrap();
            match mode {
                // KL of identical distributions is exactly zero
                LfMode::Kl => assert!(l.abs() < 1e-6, "{l}"),
                // hard mode compares against own argmax: small positive CE
                LfMode::Hard => assert!(l >= 0.0),
            }
        }
    }

    #[test]
    fn loss_f_nonnegative() {
        let f = build(ArchId::FSmall, 3);
        let x = flat_batch(3, 0.2);
        let y = flat_batch(3, 0.9);
        assert!(loss_f(&f, &x, &y, LfMode::Kl).unwrap() >= 0.0);
    }

    #[test]
    fn kl_hand_computed_two_class_value() {
        // logits (0, ln 3) vs (0, 0):
        // p = (0.25, 0.75), q = (0.5, 0.5),
        // KL = 0.75 ln(0.75/0.5) + 0.25 ln(0.25/0.5) ~ 0.13081
        let mut g: Graph<f64> = Graph::new();
        let target = softmax_rows(&Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]));
        let logits = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let l = g.kl_to_target(target, logits);
        let want = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
        assert!((want - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn loss_v_identity_stub() {
        let wm = Watermark::new(
            Tensor::full(&[3, 32, 32], 0.6),
            Tensor::full(&[1, 32, 32], 0.8),
        )
        .unwrap();
        // identity reconstruction of w' == w gives zero
        let stack = stack_watermarks(&[wm.clone(), wm.clone()]).unwrap();
        assert_eq!(loss_v_given_recon(&stack, &wm), 0.0);
        // constant +0.1 offset on every element gives 0.01
        let off = stack.map(|v| v + 0.1);
        let l = loss_v_given_recon(&off, &wm);
        assert!((l - 0.01).abs() < 1e-6, "{l}");
    }

    #[test]
    fn loss_v_matches_scalar_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rnd_plane = |c: usize| {
            Tensor::from_vec(
                &[c, 32, 32],
                (0..c * 1024).map(|_| rng.random::<f32>()).collect(),
            )
        };
        let wm = Watermark::new(rnd_plane(3), rnd_plane(1)).unwrap();
        let wp: Vec<Watermark> = (0..3)
            .map(|_| Watermark::new(rnd_plane(3), rnd_plane(1)).unwrap())
            .collect();
        let stack = stack_watermarks(&wp).unwrap();
        let fast = loss_v_given_recon(&stack, &wm);
        // independent scalar loop
        let target = wm.to_rgba_tensor();
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for w in &wp {
            let t = w.to_rgba_tensor();
            for (a, b) in t.data().iter().zip(target.data()) {
                acc += ((a - b) as f64).powi(2);
                count += 1;
            }
        }
        assert!((fast as f64 - acc / count as f64).abs() < 1e-6);
    }

    #[test]
    fn loss_d_logit_zero_gives_ln2() {
        // zero out all discriminator parameters: logits are exactly 0
        let mut d = build(ArchId::D, 0);
        for e in &mut d.entries {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let a = flat_batch(4, 0.3);
        let b = flat_batch(4, 0.7);
        let (d_loss, g_loss) = loss_d(&d, &a, &b).unwrap();
        let ln2 = std::f32::consts::LN_2;
        assert!((d_loss - ln2).abs() < 1e-6, "{d_loss}");
        assert!((g_loss - ln2).abs() < 1e-6, "{g_loss}");
    }

    #[test]
    fn bce_saturation_matches_analytic() {
        // perfect discriminator: logit +20 on real, -20 on fake
        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(Tensor::from_vec(&[2, 1], vec![20.0, -20.0]));
        let d = g.bce_with_logits_targets(logits, vec![1.0, 0.0]);
        let want_d = 0.5 * ((1.0 + (-20.0f64).exp()).ln() + (1.0 + (-20.0f64).exp()).ln());
        assert!((g.value(d).item() - want_d).abs() < 1e-12);
        assert!(g.value(d).item() < 1e-8);

        let mut g2: Graph<f64> = Graph::new();
        let fake = g2.input(Tensor::from_vec(&[1, 1], vec![-20.0]));
        let gl = g2.bce_with_logits(fake, 1.0);
        assert!((g2.value(gl).item() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn disc_loss_symmetric_under_swap() {
        let d = build(ArchId::D, 9);
        let a = flat_batch(3, 0.25);
        let b = flat_batch(3, 0.75);
        let values = cast_params::<f32>(&d);
        let fwd = build_disc_graph(
            &batch_tensor::<f32>(&a),
            &batch_tensor::<f32>(&b),
            ArchId::D,
            &values,
            false,
        )
        .unwrap();
        // swap batches and swap target labels: same mean
        let n = 3;
        let mut data = Vec::new();
        data.extend_from_slice(batch_tensor::<f32>(&b).data());
        data.extend_from_slice(batch_tensor::<f32>(&a).data());
        let mut g: Graph<f32> = Graph::new();
        let xcat = g.input(Tensor::from_vec(&[2 * n, 3, 32, 32], data));
        let arch = architecture(ArchId::D);
        let out = forward(&mut g, &arch, &values, xcat, Mode::Eval, false).unwrap();
        let mut targets = vec![0.0f32; n];
        targets.extend(std::iter::repeat(1.0).take(n));
        let swapped = g.bce_with_logits_targets(out.output, targets);
        let d1 = fwd.g.value(fwd.d_loss).item();
        let d2 = g.value(swapped).item();
        assert!((d1 - d2).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.5, 0.25, 0.25).unwrap(), 1.0);
        assert!(matches!(
            total_loss(f32::NAN, 0.0, 0.0),
            Err(Error::Numeric { .. })
        ));
        assert!(matches!(
            total_loss(0.0, f32::INFINITY, 0.0),
            Err(Error::Numeric { .. })
        ));
    }
}
