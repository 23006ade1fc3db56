//! Training: the three loss terms and total objective, classifier training,
//! the adversarial stamper loop, and finite-difference gradient verification.

mod classifier;
mod gradcheck;
mod losses;
mod optim;
mod report;
mod stamper;

pub use classifier::{accuracy, train_classifier, EvalData};
pub use gradcheck::{grad_check, LossPath};
pub use losses::{
    argmax_rows, build_disc_graph, build_stamper_graph, loss_d, loss_f, loss_v,
    loss_v_given_recon, stack_watermarks, total_loss, DiscGraph, LfMode, LossBreakdown,
    LossWeights, StamperGraph, StamperGraphCfg,
};
pub use optim::{Optimizer, OptimizerKind};
pub use report::{ReportRow, ReportSink, RunReport, REPORT_CSV, REPORT_JSON};
pub use stamper::{train_stamper, StamperOutput, StamperSetup};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Configuration shared by classifier and stamper training. Defaults follow
/// common GAN / classifier practice; everything is explicit so runs are
/// self-describing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total optimizer steps (mini-batches).
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    /// Blend factor applied when stamping during adversarial training.
    pub blend_factor: f32,
    pub n_discriminators: usize,
    pub seed: u64,
    /// Metric/checkpoint cadence in steps.
    pub eval_every: usize,

    pub momentum: f32,
    pub weight_decay: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// GMAN aggregation temperature; large tau approaches the mean, small
    /// tau approaches the max.
    pub tau: f32,
    pub lambda_f: f32,
    pub lambda_v: f32,
    pub lambda_d: f32,
    pub lf_mode: LfMode,
    /// Per-network learning-rate overrides for the stamper loop.
    pub lr_w: Option<f32>,
    pub lr_v: Option<f32>,
    pub lr_d: Option<f32>,
    /// Use the transposed-convolution discriminator variant.
    pub d_literal_transposed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.01,
            blend_factor: 0.5,
            n_discriminators: 1,
            seed: 0,
            eval_every: 200,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            tau: 1.0,
            lambda_f: 1.0,
            lambda_v: 1.0,
            lambda_d: 1.0,
            lf_mode: LfMode::Kl,
            lr_w: None,
            lr_v: None,
            lr_d: None,
            d_literal_transposed: false,
        }
    }
}

impl TrainConfig {
    pub fn classifier(seed: u64) -> Self {
        TrainConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn stamper(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 2e-4,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_discriminators == 0 {
            return Err(Error::config("n_discriminators must be at least 1"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.blend_factor) {
            return Err(Error::config(format!(
                "blend factor {} outside [0, 1]",
                self.blend_factor
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_f: self.lambda_f,
            lambda_v: self.lambda_v,
            lambda_d: self.lambda_d,
        }
    }
}
