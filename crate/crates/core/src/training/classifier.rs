//! Standard supervised training of the classifier networks F / F'.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dataio::{save_checkpoint, ImageBatch, NetworkParams};
use crate::error::{Error, Result};
use crate::nets::{architecture, cast_params, eval_forward, forward, update_running_stats, ArchId, Mode};
use crate::seeds;
use crate::tensor::Tensor;
use crate::training::losses::argmax_rows;
use crate::training::optim::{Optimizer, OptimizerKind};
use crate::training::report::{ReportRow, ReportSink, RunReport};
use crate::training::TrainConfig;

/// Validation data evaluated at reporting points.
#[derive(Clone, Copy)]
pub struct EvalData<'a> {
    pub clean: &'a ImageBatch,
    pub stamped: Option<&'a ImageBatch>,
}

/// Top-1 accuracy in percent, evaluated in chunks with eval-mode forward
/// passes. Ties resolve to the lowest class index.
pub fn accuracy(params: &NetworkParams, batch: &ImageBatch) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::dimension("accuracy of an empty batch"));
    }
    let mut correct = 0usize;
    let chunk = 512;
    let mut start = 0;
    while start < batch.len() {
        let idx: Vec<usize> = (start..(start + chunk).min(batch.len())).collect();
        let part = batch.select(&idx);
        let logits = eval_forward(params, part.data())?;
        let pred = argmax_rows(&logits);
        correct += pred
            .iter()
            .zip(part.labels())
            .filter(|(p, l)| p == l)
            .count();
        start += chunk;
    }
    Ok(100.0 * correct as f32 / batch.len() as f32)
}

fn make_optimizer(cfg: &TrainConfig) -> Optimizer {
    match cfg.optimizer {
        OptimizerKind::SgdMomentum => Optimizer::sgd(cfg.lr, cfg.momentum, cfg.weight_decay),
        OptimizerKind::Adam => Optimizer::adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2),
    }
}

/// Deterministic epoch-shuffled batch cursor; partial trailing batches are
/// dropped, matching common practice.
pub(crate) struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut c = BatchCursor {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        assert!(size <= self.order.len(), "batch larger than dataset");
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Minimizes cross-entropy with seeded shuffles and a fixed update order, so
/// (seed, config, data) fully determine every checkpoint byte. A NaN loss
/// aborts with the last good checkpoint recorded in the error.
pub fn train_classifier(
    arch: ArchId,
    train: &ImageBatch,
    eval: Option<EvalData<'_>>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(NetworkParams, RunReport)> {
    cfg.validate()?;
    if !arch.is_classifier() {
        return Err(Error::spec(format!(
            "{} is not a classifier architecture",
            arch.as_str()
        )));
    }
    let arch_spec = architecture(arch);
    let mut params = build_with_seed(arch, cfg.seed);
    let mut opt = make_optimizer(cfg);
    let mut cursor = BatchCursor::new(train.len(), seeds::mix(cfg.seed, "shuffle"));
    let mut sink = ReportSink::new(out_dir)?;
    let mut last_checkpoint = None;
    let mut window_loss = 0.0f64;
    let mut window_n = 0usize;

    if let Some(d) = out_dir {
        std::fs::create_dir_all(d.join("checkpoints")).map_err(|e| Error::io(d, e))?;
    }

    for step in 1..=cfg.steps as u64 {
        let idx = cursor.next_batch(cfg.batch_size.min(train.len()));
        let sub = train.select(&idx);

        let mut g: Graph<f32> = Graph::new();
        let input = g.input(sub.data().clone());
        let values = cast_params::<f32>(&params);
        let fw = forward(&mut g, &arch_spec, &values, input, Mode::Train, true)?;
        let loss = g.cross_entropy(fw.output, sub.labels());
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric {
                what: format!("training loss {loss_val} at step {step}"),
                last_checkpoint,
            });
        }
        let mut grads = g.backward(loss);
        let updates: Vec<(usize, Tensor<f32>)> = fw
            .bound
            .iter()
            .filter_map(|&(entry, var)| grads.take(var).map(|t| (entry, t)))
            .collect();
        opt.step(&mut params, &updates);
        update_running_stats(&mut params, &fw.bn_stats);
        params.meta.step = step;

        window_loss += loss_val as f64;
        window_n += 1;

        if step % cfg.eval_every as u64 == 0 || step == cfg.steps as u64 {
            let (acc_clean, acc_stamped) = match &eval {
                Some(e) => (
                    accuracy(&params, e.clean)?,
                    match e.stamped {
                        Some(s) => accuracy(&params, s)?,
                        None => f32::NAN,
                    },
                ),
                None => (f32::NAN, f32::NAN),
            };
            sink.push(ReportRow {
                step,
                l_f: 0.0,
                l_v: 0.0,
                l_d: 0.0,
                l_tot: (window_loss / window_n.max(1) as f64) as f32,
                d_loss: 0.0,
                acc_clean,
                acc_stamped,
            })?;
            window_loss = 0.0;
            window_n = 0;
            if let Some(d) = out_dir {
                let p = d.join("checkpoints").join(format!("step-{step}.dsck"));
                save_checkpoint(&params, &p)?;
                last_checkpoint = Some(p);
            }
        }
    }

    if let Some(d) = out_dir {
        save_checkpoint(&params, d.join("model.dsck"))?;
    }
    Ok((params, sink.finish()?))
}

fn build_with_seed(arch: ArchId, seed: u64) -> NetworkParams {
    crate::nets::build(arch, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_dataset(n: usize, seed: u64) -> ImageBatch {
        synth::make_dataset(n, seed)
    }

    #[test]
    fn overfits_small_subset() {
        let data = tiny_dataset(64, 0);
        let cfg = TrainConfig {
            steps: 220,
            batch_size: 32,
            eval_every: 220,
            seed: 1,
            ..TrainConfig::classifier(1)
        };
        let (params, _) = train_classifier(ArchId::FSmall, &data, None, &cfg, None).unwrap();
        let acc = accuracy(&params, &data).unwrap();
        assert!(acc == 100.0, "train accuracy {acc} after overfit run");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny_dataset(32, 3);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 16,
            lr: 0.0,
            eval_every: 5,
            ..TrainConfig::classifier(7)
        };
        let (params, _) = train_classifier(ArchId::FSmall, &data, None, &cfg, None).unwrap();
        let init = crate::nets::build(ArchId::FSmall, 7);
        // weights and biases unchanged; running stats do move with data
        for (a, b) in params.entries.iter().zip(&init.entries) {
            if crate::nets::is_trainable(&a.name) {
                assert_eq!(a.values, b.values, "{}", a.name);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_checkpoint_bytes() {
        let data = tiny_dataset(48, 5);
        let cfg = TrainConfig {
            steps: 12,
            batch_size: 16,
            eval_every: 6,
            ..TrainConfig::classifier(11)
        };
        let (a, _) = train_classifier(ArchId::FSmall, &data, None, &cfg, None).unwrap();
        let (b, _) = train_classifier(ArchId::FSmall, &data, None, &cfg, None).unwrap();
        assert_eq!(
            crate::dataio::encode_checkpoint(&a),
            crate::dataio::encode_checkpoint(&b)
        );
    }
}
