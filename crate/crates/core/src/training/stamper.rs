//! Adversarial training of the watermarking network W against one or more
//! discriminators, with the autoencoder V co-trained and the task classifier
//! F frozen.
//!
//! Each step runs two phases:
//!   (a) every discriminator takes one gradient step separating statically
//!       watermarked batches from synthesized ones;
//!   (b) W and V take one joint step on
//!       lambda_f * l_f + lambda_v * l_v + lambda_d * aggregate(g_loss_j),
//!       where the aggregate is the softmax-weighted combination of the
//!       per-discriminator generator losses (mean as tau -> inf, max as
//!       tau -> 0; a single discriminator reduces to its own g_loss).

use std::path::Path;

use crate::autodiff::Graph;
use crate::dataio::{save_checkpoint, ImageBatch, NetworkParams, Watermark};
use crate::error::{Error, Result};
use crate::nets::{architecture, build, cast_params, forward, ArchId, Mode};
use crate::seeds;
use crate::stamping::{blend_tensor, stamp};
use crate::tensor::Tensor;
use crate::training::classifier::{accuracy, BatchCursor};
use crate::training::losses::{build_disc_graph, build_stamper_graph, StamperGraphCfg};
use crate::training::optim::Optimizer;
use crate::training::report::{ReportRow, ReportSink, RunReport};
use crate::training::TrainConfig;

pub struct StamperSetup<'a> {
    /// Pre-trained, frozen task classifier.
    pub frozen_f: &'a NetworkParams,
    pub data: &'a ImageBatch,
    pub watermark: &'a Watermark,
    /// Small clean validation probe for accuracy reporting.
    pub eval_probe: Option<&'a ImageBatch>,
    pub out_dir: Option<&'a Path>,
}

pub struct StamperOutput {
    pub w: NetworkParams,
    pub v: NetworkParams,
    pub d: Vec<NetworkParams>,
    pub report: RunReport,
}

/// Synthesizes w' for a batch tensor and stamps it, without gradients.
fn synth_and_stamp(
    w_values: &[Tensor<f32>],
    x: &Tensor<f32>,
    w_rgba: &Tensor<f32>,
    beta: f32,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let arch = architecture(ArchId::W);
    let mut g: Graph<f32> = Graph::new();
    let input = {
        let t = crate::nets::stamper_input_tensor(x, w_rgba);
        g.input(t)
    };
    let out = forward(&mut g, &arch, w_values, input, Mode::Eval, false)?;
    let wprime = g.value(out.output).clone();
    let stamped = blend_tensor(x, &wprime, beta);
    Ok((wprime, stamped))
}

pub fn train_stamper(setup: &StamperSetup<'_>, cfg: &TrainConfig) -> Result<StamperOutput> {
    cfg.validate()?;
    let f_arch_id = ArchId::parse(&setup.frozen_f.meta.arch)?;
    if !f_arch_id.is_classifier() {
        return Err(Error::spec(format!(
            "frozen classifier has architecture {}, expected a classifier",
            setup.frozen_f.meta.arch
        )));
    }
    let d_arch_id = if cfg.d_literal_transposed {
        ArchId::DLiteral
    } else {
        ArchId::D
    };

    let mut w_params = build(ArchId::W, seeds::mix(cfg.seed, "W"));
    let mut v_params = build(ArchId::V, seeds::mix(cfg.seed, "V"));
    let mut d_params: Vec<NetworkParams> = (0..cfg.n_discriminators)
        .map(|j| build(d_arch_id, seeds::mix(cfg.seed, &format!("D{j}"))))
        .collect();

    let mut opt_w = Optimizer::adam(cfg.lr_w.unwrap_or(cfg.lr), cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_v = Optimizer::adam(cfg.lr_v.unwrap_or(cfg.lr), cfg.adam_beta1, cfg.adam_beta2);
    let mut opt_d: Vec<Optimizer> = (0..cfg.n_discriminators)
        .map(|_| Optimizer::adam(cfg.lr_d.unwrap_or(cfg.lr), cfg.adam_beta1, cfg.adam_beta2))
        .collect();

    let f_values = cast_params::<f32>(setup.frozen_f);
    let w_rgba = setup.watermark.to_rgba_tensor();
    let beta = cfg.blend_factor;

    let mut cursor = BatchCursor::new(setup.data.len(), seeds::mix(cfg.seed, "shuffle"));
    let mut sink = ReportSink::new(setup.out_dir)?;
    if let Some(d) = setup.out_dir {
        std::fs::create_dir_all(d.join("checkpoints")).map_err(|e| Error::io(d, e))?;
    }
    let mut last_checkpoint = None;

    for step in 1..=cfg.steps as u64 {
        let idx = cursor.next_batch(cfg.batch_size.min(setup.data.len()));
        let sub = setup.data.select(&idx);
        let x_t = sub.data().clone();

        // statically watermarked positives for the discriminators
        let x_w = stamp(&sub, setup.watermark, beta)?;
        let x_w_t = x_w.data().clone();

        // phase (a): discriminator updates on detached synthesized batches
        let w_values = cast_params::<f32>(&w_params);
        let (_, x_wp_detached) = synth_and_stamp(&w_values, &x_t, &w_rgba, beta)?;
        let mut d_loss_sum = 0.0f32;
        for j in 0..cfg.n_discriminators {
            let d_values = cast_params::<f32>(&d_params[j]);
            let dg = build_disc_graph(&x_w_t, &x_wp_detached, d_arch_id, &d_values, true)?;
            let d_loss = dg.g.value(dg.d_loss).item();
            if !d_loss.is_finite() {
                return Err(Error::Numeric {
                    what: format!("discriminator {j} loss {d_loss} at step {step}"),
                    last_checkpoint,
                });
            }
            d_loss_sum += d_loss;
            let mut grads = dg.g.backward(dg.d_loss);
            let updates: Vec<(usize, Tensor<f32>)> = dg
                .d_bound
                .iter()
                .filter_map(|&(entry, var)| grads.take(var).map(|t| (entry, t)))
                .collect();
            opt_d[j].step(&mut d_params[j], &updates);
            d_params[j].meta.step = step;
        }
        let d_loss_mean = d_loss_sum / cfg.n_discriminators as f32;

        // phase (b): joint W and V update against the updated discriminators
        let w_values = cast_params::<f32>(&w_params);
        let v_values = cast_params::<f32>(&v_params);
        let d_values: Vec<Vec<Tensor<f32>>> =
            d_params.iter().map(|p| cast_params::<f32>(p)).collect();
        let sg_cfg = StamperGraphCfg {
            w_values: &w_values,
            v_values: &v_values,
            f_values: &f_values,
            f_arch: f_arch_id,
            d_values: &d_values,
            d_arch: d_arch_id,
            beta,
            weights: (cfg.lambda_f, cfg.lambda_v, cfg.lambda_d),
            tau: cfg.tau,
            lf_mode: cfg.lf_mode,
            train_w: true,
            train_v: true,
        };
        let sg = build_stamper_graph(&x_t, &w_rgba, &sg_cfg)?;
        let l_f = sg.g.value(sg.l_f).item();
        let l_v = sg.g.value(sg.l_v).item();
        let l_d = sg.g.value(sg.l_d).item();
        let l_tot = sg.g.value(sg.l_tot).item();
        for (name, v) in [("l_f", l_f), ("l_v", l_v), ("l_d", l_d), ("l_tot", l_tot)] {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    what: format!("{name} is {v} at step {step}"),
                    last_checkpoint,
                });
            }
        }
        let mut grads = sg.g.backward(sg.l_tot);
        let w_updates: Vec<(usize, Tensor<f32>)> = sg
            .w_bound
            .iter()
            .filter_map(|&(entry, var)| grads.take(var).map(|t| (entry, t)))
            .collect();
        let v_updates: Vec<(usize, Tensor<f32>)> = sg
            .v_bound
            .iter()
            .filter_map(|&(entry, var)| grads.take(var).map(|t| (entry, t)))
            .collect();
        opt_w.step(&mut w_params, &w_updates);
        opt_v.step(&mut v_params, &v_updates);
        w_params.meta.step = step;
        v_params.meta.step = step;

        if step % cfg.eval_every as u64 == 0 || step == cfg.steps as u64 {
            let (acc_clean, acc_stamped) = match setup.eval_probe {
                Some(probe) => {
                    let acc_clean = accuracy(setup.frozen_f, probe)?;
                    let w_values = cast_params::<f32>(&w_params);
                    let (_, stamped_t) =
                        synth_and_stamp(&w_values, probe.data(), &w_rgba, beta)?;
                    let stamped = ImageBatch::new(
                        stamped_t.map(|v| v.clamp(0.0, 1.0)),
                        probe.labels().to_vec(),
                    )?;
                    (acc_clean, accuracy(setup.frozen_f, &stamped)?)
                }
                None => (f32::NAN, f32::NAN),
            };
            sink.push(ReportRow {
                step,
                l_f,
                l_v,
                l_d,
                l_tot,
                d_loss: d_loss_mean,
                acc_clean,
                acc_stamped,
            })?;
            if let Some(dir) = setup.out_dir {
                let ck = dir.join("checkpoints");
                save_checkpoint(&w_params, ck.join(format!("w-step-{step}.dsck")))?;
                save_checkpoint(&v_params, ck.join(format!("v-step-{step}.dsck")))?;
                for (j, dp) in d_params.iter().enumerate() {
                    save_checkpoint(dp, ck.join(format!("d{j}-step-{step}.dsck")))?;
                }
                last_checkpoint = Some(ck.join(format!("w-step-{step}.dsck")));
            }
        }
    }

    if let Some(dir) = setup.out_dir {
        save_checkpoint(&w_params, dir.join("w.dsck"))?;
        save_checkpoint(&v_params, dir.join("v.dsck"))?;
        for (j, dp) in d_params.iter().enumerate() {
            save_checkpoint(dp, dir.join(format!("d{j}.dsck")))?;
        }
    }

    Ok(StamperOutput {
        w: w_params,
        v: v_params,
        d: d_params,
        report: sink.finish()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::training::losses::loss_d;

    fn quick_setup() -> (NetworkParams, ImageBatch, Watermark) {
        let data = synth::make_dataset(64, 2);
        let f = build(ArchId::FSmall, 3);
        let wm = synth::synth_watermark(0);
        (f, data, wm)
    }

    #[test]
    fn single_discriminator_runs_and_freezes_f() {
        let (f, data, wm) = quick_setup();
        let f_bytes = f.value_bytes();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 16,
            eval_every: 3,
            ..TrainConfig::stamper(5)
        };
        let out = train_stamper(
            &StamperSetup {
                frozen_f: &f,
                data: &data,
                watermark: &wm,
                eval_probe: None,
                out_dir: None,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.d.len(), 1);
        // frozen-F contract: parameter bytes identical before and after
        assert_eq!(f.value_bytes(), f_bytes);
        assert_eq!(out.report.rows.len(), 1);
    }

    #[test]
    fn zero_weights_leave_w_unchanged() {
        let (f, data, wm) = quick_setup();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 16,
            eval_every: 3,
            lambda_f: 0.0,
            lambda_v: 0.0,
            lambda_d: 0.0,
            ..TrainConfig::stamper(5)
        };
        let out = train_stamper(
            &StamperSetup {
                frozen_f: &f,
                data: &data,
                watermark: &wm,
                eval_probe: None,
                out_dir: None,
            },
            &cfg,
        )
        .unwrap();
        let init = build(ArchId::W, seeds::mix(5, "W"));
        assert_eq!(out.w.value_bytes(), init.value_bytes());
    }

    #[test]
    fn discriminator_learns_on_fixed_batch_with_frozen_w() {
        let (f, data, wm) = {
            let data = synth::make_dataset(32, 2);
            let f = build(ArchId::FSmall, 3);
            let wm = synth::synth_watermark(0);
            (f, data, wm)
        };
        let cfg = TrainConfig {
            steps: 100,
            batch_size: 32, // dataset size: every step sees the same batch
            eval_every: 100,
            lr_w: Some(0.0),
            lr_v: Some(0.0),
            ..TrainConfig::stamper(7)
        };
        let out = train_stamper(
            &StamperSetup {
                frozen_f: &f,
                data: &data,
                watermark: &wm,
                eval_probe: None,
                out_dir: None,
            },
            &cfg,
        )
        .unwrap();

        // d_loss of the trained D on the fixed batch vs a fresh D
        let beta = cfg.blend_factor;
        let x_w = stamp(&data, &wm, beta).unwrap();
        let w_values = cast_params::<f32>(&out.w);
        let (_, x_wp) =
            synth_and_stamp(&w_values, data.data(), &wm.to_rgba_tensor(), beta).unwrap();
        let x_wp_batch =
            ImageBatch::new(x_wp.map(|v| v.clamp(0.0, 1.0)), data.labels().to_vec()).unwrap();

        let fresh = build(ArchId::D, seeds::mix(7, "D0"));
        let (d0, _) = loss_d(&fresh, &x_w, &x_wp_batch).unwrap();
        let (d1, _) = loss_d(&out.d[0], &x_w, &x_wp_batch).unwrap();
        assert!(
            d1 < d0,
            "trained discriminator loss {d1} should beat initial {d0}"
        );
    }
}
