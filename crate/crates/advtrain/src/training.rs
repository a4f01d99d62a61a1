//! Joint training of the classifier and the feature discriminator.
//!
//! Each iteration builds the perturbed mini-batch against the current
//! parameters, updates the discriminator on real-vs-perturbed features,
//! then updates the classifier on the mixed classification loss plus the
//! discriminator-fooling term. The perturbed batch is a constant during
//! backpropagation. Everything is driven by named substreams of one root
//! seed, so a (seed, config, data) triple pins every metric bit.

use serde::{Deserialize, Serialize};

use crate::attack::{accuracy, fgsm_from_trace, AttackConfig};
use crate::dataset::{batches, split_train_validation, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{classification_loss, discriminator_loss, encoder_adversarial_loss};
use crate::network::{
    attach_discriminator, backward, backward_discriminator, forward_classifier,
    forward_discriminator, init_params, ForwardTrace, GradTargets, Gradients, ModelConfig,
    ModelParams, UpstreamGradients,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// The four training regimes, identified by their loss mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Clean cross-entropy only (alpha 1, beta 0).
    Simple,
    /// Mixed clean/perturbed cross-entropy (alpha 1/2, beta 0).
    At,
    /// Clean cross-entropy plus the encoder fooling term (alpha 1, beta 1).
    A2t,
    /// Mixed cross-entropy plus the fooling term (alpha 1/2, beta 1).
    A3t,
}

impl TrainMode {
    /// Loss weights (alpha, beta) the mode stands for.
    pub fn mixing(self) -> (f64, f64) {
        match self {
            TrainMode::Simple => (1.0, 0.0),
            TrainMode::At => (0.5, 0.0),
            TrainMode::A2t => (1.0, 1.0),
            TrainMode::A3t => (0.5, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Simple => "simple",
            TrainMode::At => "at",
            TrainMode::A2t => "a2t",
            TrainMode::A3t => "a3t",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "simple" => Ok(TrainMode::Simple),
            "at" => Ok(TrainMode::At),
            "a2t" => Ok(TrainMode::A2t),
            "a3t" => Ok(TrainMode::A3t),
            other => Err(Error::Config(format!(
                "unknown mode '{other}', expected simple|at|a2t|a3t"
            ))),
        }
    }
}

/// Everything a training run depends on besides the architecture and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Clean/perturbed mixing weight; defaults follow the mode.
    pub alpha: f64,
    /// Encoder fooling weight; defaults follow the mode.
    pub beta: f64,
    /// Perturbation budget used while training.
    pub train_epsilon: f64,
    pub clip_adversarial: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Fraction of the training split held out for validation when no
    /// explicit count is given.
    pub validation_fraction: f64,
    pub validation_count: Option<usize>,
    /// Discriminator updates per classifier update; one is enough.
    pub disc_updates: usize,
    /// Rows of the training split used for the per-epoch training metrics;
    /// keeps epoch evaluation affordable at full-dataset scale.
    pub train_metric_sample: usize,
}

impl TrainConfig {
    /// Canonical configuration for a mode.
    pub fn for_mode(mode: TrainMode) -> TrainConfig {
        let (alpha, beta) = mode.mixing();
        TrainConfig {
            mode,
            alpha,
            beta,
            train_epsilon: 0.25,
            clip_adversarial: true,
            epochs: 20,
            batch_size: 100,
            optimizer: AdamConfig::default(),
            seed: 0,
            validation_fraction: 1.0 / 6.0,
            validation_count: None,
            disc_updates: 1,
            train_metric_sample: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} must lie in [0,1]", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !self.train_epsilon.is_finite() || self.train_epsilon < 0.0 {
            return Err(Error::Config(format!(
                "train epsilon {} must be >= 0",
                self.train_epsilon
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.disc_updates == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and disc_updates must be >= 1".to_string(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} must lie in (0,1)",
                self.validation_fraction
            )));
        }
        if self.train_metric_sample == 0 {
            return Err(Error::Config("train_metric_sample must be >= 1".to_string()));
        }
        self.optimizer.validate()
    }

    /// Whether this configuration ever builds perturbed batches.
    fn uses_adversarial_batches(&self) -> bool {
        !(self.alpha == 1.0 && self.beta == 0.0)
    }

    fn resolved_validation_count(&self, n: usize) -> usize {
        self.validation_count
            .unwrap_or_else(|| ((n as f64) * self.validation_fraction).round() as usize)
    }
}

/// Loss values of one training step (batch means).
#[derive(Clone, Copy, Debug, Default)]
pub struct StepMetrics {
    pub loss_cls: f64,
    pub loss_disc: f64,
    pub loss_enc_adv: f64,
}

/// One completed epoch of the metric series.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls_acc_real_train: f64,
    pub cls_acc_adv_train: f64,
    pub cls_acc_real_val: f64,
    pub cls_acc_adv_val: f64,
    pub disc_acc_real_train: f64,
    pub disc_acc_adv_train: f64,
    pub disc_acc_real_val: f64,
    pub disc_acc_adv_val: f64,
    pub loss_cls: f64,
    pub loss_disc: f64,
    pub loss_enc_adv: f64,
}

/// Per-epoch metric rows plus CSV emission in a fixed column order.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsHistory {
    pub const CSV_HEADER: &'static str = "epoch,cls_acc_real_train,cls_acc_adv_train,cls_acc_real_val,cls_acc_adv_val,disc_acc_real_train,disc_acc_adv_train,disc_acc_real_val,disc_acc_adv_val,loss_cls,loss_disc,loss_enc_adv";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.epoch,
                row.cls_acc_real_train,
                row.cls_acc_adv_train,
                row.cls_acc_real_val,
                row.cls_acc_adv_val,
                row.disc_acc_real_train,
                row.disc_acc_adv_train,
                row.disc_acc_real_val,
                row.disc_acc_adv_val,
                row.loss_cls,
                row.loss_disc,
                row.loss_enc_adv,
            ));
        }
        out
    }
}

/// Accuracy quadruple from [`evaluate`].
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EvalMetrics {
    pub real_acc: f64,
    pub adv_acc: f64,
    pub disc_real_acc: f64,
    pub disc_adv_acc: f64,
}

fn check_finite(value: f64, term: &'static str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, iteration })
    }
}

/// A mini-batch prepared for one training step: the recorded clean forward
/// pass and the perturbed batch generated against the current parameters,
/// which is held constant for the rest of the step.
pub struct PreparedBatch {
    pub labels: Vec<u8>,
    pub trace_real: ForwardTrace,
    pub x_adv: Tensor,
    pub trace_adv: ForwardTrace,
}

/// Step sub-phase 1: forward the clean batch, generate its perturbed
/// counterpart, and forward that too.
pub fn prepare_batch(
    model_config: &ModelConfig,
    config: &TrainConfig,
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
) -> Result<PreparedBatch> {
    if x.rows() == 0 {
        return Err(Error::Usage("train_step on an empty batch".to_string()));
    }
    let attack = AttackConfig {
        epsilon: config.train_epsilon,
        clip_to_unit_box: config.clip_adversarial,
    };
    let trace_real = forward_classifier(model_config, params, x)?;
    let x_adv = fgsm_from_trace(model_config, params, &trace_real, labels, &attack)?;
    let trace_adv = forward_classifier(model_config, params, &x_adv)?;
    Ok(PreparedBatch {
        labels: labels.to_vec(),
        trace_real,
        x_adv,
        trace_adv,
    })
}

/// Step sub-phase 2: train-mode discriminator pass over the real and
/// perturbed features tagged 1/0, then an optimizer update of the
/// discriminator parameters only. Repeats `disc_updates` times with a fresh
/// dropout mask each time.
pub fn discriminator_substep(
    model_config: &ModelConfig,
    config: &TrainConfig,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &PreparedBatch,
    dropout_rng: &mut RngState,
    iteration: u64,
) -> Result<f64> {
    let z_pair = batch.trace_real.feature().vstack(batch.trace_adv.feature())?;
    let real_rows = batch.trace_real.feature().rows();
    let mut tags = vec![1u8; real_rows];
    tags.resize(z_pair.rows(), 0);
    let mut loss_disc = 0.0;
    for _ in 0..config.disc_updates {
        let disc_trace = forward_discriminator(model_config, params, &z_pair, true, dropout_rng)?;
        let (value, grad) = discriminator_loss(&disc_trace.logits, &tags)?;
        loss_disc = check_finite(value, "discriminator", iteration)?;
        let (layer_grads, _) =
            backward_discriminator(model_config, params, &disc_trace, &grad, true, false)?;
        opt.update_discriminator(params, &layer_grads.expect("params requested"))?;
    }
    Ok(loss_disc)
}

/// Step sub-phase 3: the mixed classification loss plus the beta-weighted
/// fooling loss through a fresh train-mode discriminator pass over the
/// perturbed features, followed by one optimizer update of encoder and
/// residual. The encoder receives both terms, the residual only the
/// classification term, and the discriminator stays frozen.
pub fn classifier_substep(
    model_config: &ModelConfig,
    config: &TrainConfig,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &mut PreparedBatch,
    dropout_rng: &mut RngState,
    iteration: u64,
) -> Result<(f64, f64)> {
    let adv_logits = if config.alpha < 1.0 {
        Some(batch.trace_adv.logits())
    } else {
        None
    };
    let cls = classification_loss(batch.trace_real.logits(), adv_logits, &batch.labels, config.alpha)?;
    let loss_cls = check_finite(cls.value, "classification", iteration)?;

    let mut loss_enc_adv = 0.0;
    let mut enc_adv_grad: Option<Tensor> = None;
    if config.beta > 0.0 {
        // Fresh train-mode pass over the perturbed features, against the
        // just-updated discriminator.
        attach_discriminator(&mut batch.trace_adv, model_config, params, true, dropout_rng)?;
        let disc_logits = &batch.trace_adv.disc.as_ref().expect("just attached").logits;
        let (value, grad) = encoder_adversarial_loss(disc_logits, config.beta)?;
        loss_enc_adv = check_finite(value, "encoder fooling", iteration)?;
        enc_adv_grad = Some(grad);
    }

    let real_grads = backward(
        model_config,
        params,
        &batch.trace_real,
        UpstreamGradients {
            logits: Some(&cls.grad_real),
            disc_logits: None,
        },
        GradTargets::classifier(),
    )?;
    let total = if cls.grad_adv.is_some() || enc_adv_grad.is_some() {
        let adv_grads = backward(
            model_config,
            params,
            &batch.trace_adv,
            UpstreamGradients {
                logits: cls.grad_adv.as_ref(),
                disc_logits: enc_adv_grad.as_ref(),
            },
            GradTargets {
                encoder: true,
                residual: cls.grad_adv.is_some(),
                ..GradTargets::default()
            },
        )?;
        // The perturbed trace contributes no residual gradient when the
        // classification mix is fully on the clean side.
        let adv_grads = if adv_grads.residual.is_none() {
            Gradients {
                residual: real_grads.residual.clone().map(|layers| {
                    layers
                        .iter()
                        .map(|lg| crate::network::LayerGrads {
                            weight: Tensor::zeros(lg.weight.rows(), lg.weight.cols()),
                            bias: Tensor::zeros(lg.bias.rows(), lg.bias.cols()),
                        })
                        .collect()
                }),
                ..adv_grads
            }
        } else {
            adv_grads
        };
        real_grads.accumulate(&adv_grads)?
    } else {
        real_grads
    };

    opt.update_classifier(
        params,
        total.encoder.as_deref().expect("encoder targeted"),
        total.residual.as_deref().expect("residual targeted"),
    )?;
    Ok((loss_cls, loss_enc_adv))
}

/// One full training step: perturb, update the discriminator, update the
/// classifier. The discriminator still receives its update when alpha is 1
/// and beta is 0; it simply never influences the classifier then. The
/// training loop's clean regime takes a reduced path instead that skips
/// perturbation and discriminator work entirely.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model_config: &ModelConfig,
    config: &TrainConfig,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[u8],
    dropout_rng: &mut RngState,
    iteration: u64,
) -> Result<StepMetrics> {
    let mut batch = prepare_batch(model_config, config, params, x, labels)?;
    let loss_disc =
        discriminator_substep(model_config, config, params, opt, &batch, dropout_rng, iteration)?;
    let (loss_cls, loss_enc_adv) =
        classifier_substep(model_config, config, params, opt, &mut batch, dropout_rng, iteration)?;
    Ok(StepMetrics {
        loss_cls,
        loss_disc,
        loss_enc_adv,
    })
}

/// Reduced step for the clean regime: plain cross-entropy descent, no
/// perturbed batch and no discriminator involvement at all.
fn simple_step(
    model_config: &ModelConfig,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[u8],
    iteration: u64,
) -> Result<StepMetrics> {
    let trace = forward_classifier(model_config, params, x)?;
    let cls = classification_loss(trace.logits(), None, labels, 1.0)?;
    let loss_cls = check_finite(cls.value, "classification", iteration)?;
    let grads = backward(
        model_config,
        params,
        &trace,
        UpstreamGradients {
            logits: Some(&cls.grad_real),
            disc_logits: None,
        },
        GradTargets::classifier(),
    )?;
    opt.update_classifier(
        params,
        grads.encoder.as_deref().expect("encoder targeted"),
        grads.residual.as_deref().expect("residual targeted"),
    )?;
    Ok(StepMetrics {
        loss_cls,
        ..StepMetrics::default()
    })
}

/// Accuracy of the model and its discriminator on a dataset, with dropout
/// off and the perturbed counterpart regenerated against the evaluated
/// parameters at `epsilon`. Discriminator accuracy counts a feature as
/// classified real when its logit is non-negative (the 0.5 tie goes to
/// real).
pub fn evaluate(
    model_config: &ModelConfig,
    params: &ModelParams,
    data: &DatasetSplit,
    epsilon: f64,
    clip: bool,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Usage("evaluate on an empty dataset".to_string()));
    }
    let attack = AttackConfig {
        epsilon,
        clip_to_unit_box: clip,
    };
    attack.validate()?;
    let mut rng_unused = RngState::new(0); // eval mode draws nothing
    let chunk = 1000;
    let n = data.len();
    let (mut real_ok, mut adv_ok) = (0.0, 0.0);
    let (mut disc_real_ok, mut disc_adv_ok) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = data.images.select_rows(&idx);
        let y = &data.labels[start..end];
        let trace = forward_classifier(model_config, params, &x)?;
        real_ok += accuracy(trace.logits(), y)? * y.len() as f64;
        let x_adv = fgsm_from_trace(model_config, params, &trace, y, &attack)?;
        let trace_adv = forward_classifier(model_config, params, &x_adv)?;
        adv_ok += accuracy(trace_adv.logits(), y)? * y.len() as f64;
        let d_real =
            forward_discriminator(model_config, params, trace.feature(), false, &mut rng_unused)?;
        let d_adv = forward_discriminator(
            model_config,
            params,
            trace_adv.feature(),
            false,
            &mut rng_unused,
        )?;
        disc_real_ok += d_real.logits.data().iter().filter(|&&l| l >= 0.0).count() as f64;
        disc_adv_ok += d_adv.logits.data().iter().filter(|&&l| l < 0.0).count() as f64;
        start = end;
    }
    let total = n as f64;
    Ok(EvalMetrics {
        real_acc: real_ok / total,
        adv_acc: adv_ok / total,
        disc_real_acc: disc_real_ok / total,
        disc_adv_acc: disc_adv_ok / total,
    })
}

fn head_sample(data: &DatasetSplit, count: usize) -> DatasetSplit {
    let take = count.min(data.len());
    let idx: Vec<usize> = (0..take).collect();
    DatasetSplit {
        images: data.images.select_rows(&idx),
        labels: data.labels[..take].to_vec(),
        name: data.name,
    }
}

/// Train a fresh model. The data is the full training split; the validation
/// rows are carved off its tail in file order before any shuffling. Returns
/// the final parameters and one metric row per epoch, all a deterministic
/// function of (seed, configs, data).
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &DatasetSplit,
) -> Result<(ModelParams, MetricsHistory)> {
    train_with_observer(config, model_config, data, |_| {})
}

/// [`train`] with a per-epoch callback, which the operator surface uses for
/// progress output.
pub fn train_with_observer(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &DatasetSplit,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ModelParams, MetricsHistory)> {
    config.validate()?;
    model_config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".to_string()));
    }
    if data.images.cols() != model_config.input_dim {
        return Err(Error::Data(format!(
            "dataset width {} does not match input_dim {}",
            data.images.cols(),
            model_config.input_dim
        )));
    }
    if data.images.rows() != data.labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            data.images.rows(),
            data.labels.len()
        )));
    }
    if let Some(&bad) = data
        .labels
        .iter()
        .find(|&&l| usize::from(l) >= model_config.num_classes)
    {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            model_config.num_classes
        )));
    }
    let val_count = config.resolved_validation_count(data.len());
    let (train_split, val_split) = split_train_validation(data, val_count)?;

    let mut init_rng = RngState::substream(config.seed, "init");
    let mut shuffle_rng = RngState::substream(config.seed, "shuffle");
    let mut dropout_rng = RngState::substream(config.seed, "dropout");

    let mut params = init_params(model_config, &mut init_rng)?;
    let mut opt = OptimizerState::new(&params, config.optimizer)?;
    let train_sample = head_sample(&train_split, config.train_metric_sample);

    let simple_mode = !config.uses_adversarial_batches();
    let mut history = MetricsHistory::default();
    let mut iteration: u64 = 0;
    for epoch in 1..=config.epochs {
        let (mut sum_cls, mut sum_disc, mut sum_enc) = (0.0, 0.0, 0.0);
        let mut steps = 0.0;
        for (x, y) in batches(&train_split, config.batch_size, &mut shuffle_rng) {
            iteration += 1;
            let metrics = if simple_mode {
                simple_step(model_config, &mut params, &mut opt, &x, &y, iteration)?
            } else {
                train_step(
                    model_config,
                    config,
                    &mut params,
                    &mut opt,
                    &x,
                    &y,
                    &mut dropout_rng,
                    iteration,
                )?
            };
            sum_cls += metrics.loss_cls;
            sum_disc += metrics.loss_disc;
            sum_enc += metrics.loss_enc_adv;
            steps += 1.0;
        }
        let on_train = evaluate(
            model_config,
            &params,
            &train_sample,
            config.train_epsilon,
            config.clip_adversarial,
        )?;
        let on_val = evaluate(
            model_config,
            &params,
            &val_split,
            config.train_epsilon,
            config.clip_adversarial,
        )?;
        let row = EpochMetrics {
            epoch,
            cls_acc_real_train: on_train.real_acc,
            cls_acc_adv_train: on_train.adv_acc,
            cls_acc_real_val: on_val.real_acc,
            cls_acc_adv_val: on_val.adv_acc,
            disc_acc_real_train: on_train.disc_real_acc,
            disc_acc_adv_train: on_train.disc_adv_acc,
            disc_acc_real_val: on_val.disc_real_acc,
            disc_acc_adv_val: on_val.disc_adv_acc,
            loss_cls: sum_cls / steps,
            loss_disc: sum_disc / steps,
            loss_enc_adv: sum_enc / steps,
        };
        on_epoch(&row);
        history.epochs.push(row);
    }
    Ok((params, history))
}
