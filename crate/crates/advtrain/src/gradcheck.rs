//! Finite-difference verification of every analytic gradient.
//!
//! Runs randomized small configurations and compares each loss gradient and
//! each reverse-mode parameter/input gradient against central differences.
//! Samples that land a pre-activation close to an activation kink are
//! redrawn, since central differences straddle the kink there. Dropout
//! masks are frozen per scenario so the differenced objective is the same
//! deterministic function the analytic path differentiates.

use crate::error::Result;
use crate::losses::{classification_loss, discriminator_loss, encoder_adversarial_loss};
use crate::network::{
    backward, forward_classifier, forward_discriminator_masked, init_params, input_gradient,
    DiscTrace, ForwardTrace, GradTargets, Gradients, ModelConfig, ModelParams, UpstreamGradients,
};
use crate::rng::{draw, Distribution, RngState};
use crate::tensor::Tensor;

/// Options for one verification run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub trials: usize,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Central-difference step for gradients through the network.
    pub network_step: f64,
    /// Central-difference step for the bare loss heads.
    pub loss_step: f64,
    /// Deliberately corrupt one analytic gradient; the run must then fail.
    pub negative_control: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            trials: 50,
            tolerance: 1e-5,
            network_step: 1e-5,
            loss_step: 1e-6,
            negative_control: false,
        }
    }
}

/// Outcome of a verification run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checks: usize,
    pub worst_rel_error: f64,
    /// Which comparison produced the worst error.
    pub worst_case: String,
    pub passed: bool,
}

/// Relative error with an absolute fallback for small-magnitude pairs.
/// Differencing noise sits around 1e-11 here, so a ratio against a
/// coordinate much below 1e-4 would measure that noise rather than the
/// gradient; such coordinates are held to the tolerance absolutely instead.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-4 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

struct Recorder {
    checks: usize,
    worst: f64,
    worst_case: String,
}

impl Recorder {
    fn note(&mut self, analytic: f64, numeric: f64, what: impl Fn() -> String) {
        self.checks += 1;
        let err = rel_error(analytic, numeric);
        if err > self.worst {
            self.worst = err;
            self.worst_case = what();
        }
    }
}

/// Five-point central difference of a scalar function of one coordinate.
/// Fourth-order accurate, which keeps truncation noise well below the pass
/// tolerance even for sharply curved objectives.
fn central_difference(step: f64, mut eval: impl FnMut(f64) -> f64) -> f64 {
    (eval(-2.0 * step) - 8.0 * eval(-step) + 8.0 * eval(step) - eval(2.0 * step)) / (12.0 * step)
}

/// Compare an analytic gradient tensor against central differences of a
/// scalar objective evaluated at bumped copies of `at`.
fn check_tensor(
    rec: &mut Recorder,
    name: &str,
    at: &Tensor,
    analytic: &Tensor,
    step: f64,
    mut objective: impl FnMut(&Tensor) -> f64,
) {
    assert_eq!(at.shape(), analytic.shape(), "{name}: gradient shape");
    for idx in 0..at.data().len() {
        let numeric = central_difference(step, |delta| {
            let mut bumped = at.data().to_vec();
            bumped[idx] += delta;
            objective(&Tensor::from_vec(at.rows(), at.cols(), bumped).expect("finite bump"))
        });
        rec.note(analytic.data()[idx], numeric, || format!("{name}[{idx}]"));
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Group {
    Encoder,
    Residual,
    Discriminator,
}

impl Group {
    fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Residual => "residual",
            Group::Discriminator => "discriminator",
        }
    }

    fn layers(self, params: &ModelParams) -> &[crate::network::Layer] {
        match self {
            Group::Encoder => &params.encoder,
            Group::Residual => &params.residual,
            Group::Discriminator => &params.discriminator,
        }
    }

    fn layers_mut(self, params: &mut ModelParams) -> &mut [crate::network::Layer] {
        match self {
            Group::Encoder => &mut params.encoder,
            Group::Residual => &mut params.residual,
            Group::Discriminator => &mut params.discriminator,
        }
    }
}

/// Bump one parameter coordinate, returning the modified copy.
fn perturbed(
    params: &ModelParams,
    group: Group,
    layer: usize,
    bias: bool,
    idx: usize,
    delta: f64,
) -> ModelParams {
    let mut out = params.clone();
    let target = &mut group.layers_mut(&mut out)[layer];
    let tensor = if bias { &mut target.bias } else { &mut target.weight };
    tensor.data_mut()[idx] += delta;
    out
}

/// One joint objective used for the through-the-network scenarios. Every
/// term is optional so each scenario can isolate one path or combine them.
struct Scenario {
    alpha: Option<f64>,
    disc_tags: Option<Vec<u8>>,
    fool_beta: Option<f64>,
}

impl Scenario {
    /// Evaluate the scalar objective at the given parameters. The dropout
    /// mask is fixed by the caller.
    fn objective(
        &self,
        config: &ModelConfig,
        params: &ModelParams,
        x: &Tensor,
        labels: &[u8],
        mask: &Tensor,
        train_mode: bool,
    ) -> f64 {
        let trace = forward_classifier(config, params, x).expect("forward");
        let mut total = 0.0;
        if let Some(alpha) = self.alpha {
            total += alpha
                * classification_loss(trace.logits(), None, labels, 1.0)
                    .expect("classification loss")
                    .value;
        }
        if self.disc_tags.is_some() || self.fool_beta.is_some() {
            let disc = forward_discriminator_masked(
                config,
                params,
                trace.feature(),
                train_mode,
                mask.clone(),
            )
            .expect("discriminator forward");
            if let Some(tags) = &self.disc_tags {
                total += discriminator_loss(&disc.logits, tags).expect("disc loss").0;
            }
            if let Some(beta) = self.fool_beta {
                total += encoder_adversarial_loss(&disc.logits, beta)
                    .expect("fooling loss")
                    .0;
            }
        }
        total
    }

    /// Analytic gradients via a recorded forward plus one backward pass.
    #[allow(clippy::too_many_arguments)]
    fn analytic(
        &self,
        config: &ModelConfig,
        params: &ModelParams,
        x: &Tensor,
        labels: &[u8],
        mask: &Tensor,
        train_mode: bool,
        targets: GradTargets,
    ) -> (Gradients, ForwardTrace) {
        let mut trace = forward_classifier(config, params, x).expect("forward");
        let cls_grad = self.alpha.map(|alpha| {
            classification_loss(trace.logits(), None, labels, 1.0)
                .expect("classification loss")
                .grad_real
                .scale(alpha)
        });
        let mut disc_grad: Option<Tensor> = None;
        if self.disc_tags.is_some() || self.fool_beta.is_some() {
            let disc: DiscTrace = forward_discriminator_masked(
                config,
                params,
                trace.feature(),
                train_mode,
                mask.clone(),
            )
            .expect("discriminator forward");
            let mut g = Tensor::zeros(disc.logits.rows(), 1);
            if let Some(tags) = &self.disc_tags {
                let (_, dg) = discriminator_loss(&disc.logits, tags).expect("disc loss");
                g = g.add(&dg).expect("same shape");
            }
            if let Some(beta) = self.fool_beta {
                let (_, fg) = encoder_adversarial_loss(&disc.logits, beta).expect("fooling loss");
                g = g.add(&fg).expect("same shape");
            }
            disc_grad = Some(g);
            trace.disc = Some(disc);
        }
        let grads = backward(
            config,
            params,
            &trace,
            UpstreamGradients {
                logits: cls_grad.as_ref(),
                disc_logits: disc_grad.as_ref(),
            },
            targets,
        )
        .expect("backward");
        (grads, trace)
    }
}

fn random_config(rng: &mut RngState) -> ModelConfig {
    let hidden = vec![3 + rng.next_below(3), 3 + rng.next_below(2)];
    let split = 1 + rng.next_below(hidden.len());
    ModelConfig {
        input_dim: 3 + rng.next_below(3),
        hidden_widths: hidden,
        num_classes: 2 + rng.next_below(3),
        split_index: split,
        leaky_slope: if rng.next_below(2) == 0 { 0.01 } else { 0.1 },
        disc_hidden: 3 + rng.next_below(2),
        disc_dropout_rate: if rng.next_below(2) == 0 { 0.0 } else { 0.5 },
    }
}

/// Smallest absolute pre-activation across the trunk's hidden layers and
/// the discriminator's hidden layer; inputs this close to a kink are
/// redrawn before differencing.
fn kink_margin(config: &ModelConfig, params: &ModelParams, x: &Tensor, mask: &Tensor) -> f64 {
    let trace = forward_classifier(config, params, x).expect("forward");
    let mut margin = f64::INFINITY;
    for pre in trace.pre_activations.iter().take(trace.pre_activations.len() - 1) {
        for &v in pre.data() {
            margin = margin.min(v.abs());
        }
    }
    let disc = forward_discriminator_masked(config, params, trace.feature(), true, mask.clone())
        .expect("discriminator forward");
    for &v in disc.pre_hidden.data() {
        margin = margin.min(v.abs());
    }
    margin
}

/// Run the verification suite and report the worst relative error.
pub fn run_gradcheck(options: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = RngState::substream(options.seed, "gradcheck");
    let mut rec = Recorder {
        checks: 0,
        worst: 0.0,
        worst_case: String::new(),
    };

    for trial in 0..options.trials {
        // Bare loss heads against their own finite differences.
        check_loss_heads(&mut rng, &mut rec, options.loss_step, trial);

        // Randomized small network, redrawn until clear of kinks.
        let config = random_config(&mut rng);
        let params = init_params(&config, &mut rng)?;
        let batch = 2 + rng.next_below(2);
        let mut x;
        let mut mask;
        let mut attempts = 0;
        loop {
            x = draw(&mut rng, batch, config.input_dim, Distribution::Uniform { low: 0.05, high: 0.95 })?;
            mask = if config.disc_dropout_rate > 0.0 {
                draw(
                    &mut rng,
                    batch,
                    config.disc_hidden,
                    Distribution::Bernoulli { p: 1.0 - config.disc_dropout_rate },
                )?
            } else {
                Tensor::filled(batch, config.disc_hidden, 1.0)
            };
            attempts += 1;
            if kink_margin(&config, &params, &x, &mask) > 1e-3 || attempts > 50 {
                break;
            }
        }
        let labels: Vec<u8> = (0..batch)
            .map(|_| rng.next_below(config.num_classes) as u8)
            .collect();
        let train_mode = config.disc_dropout_rate > 0.0;
        let mut tags: Vec<u8> = (0..batch).map(|_| rng.next_below(2) as u8).collect();
        tags[0] = 1; // keep both classes reachable

        let scenarios: [(&str, Scenario, GradTargets); 3] = [
            (
                "classification",
                Scenario { alpha: Some(1.0), disc_tags: None, fool_beta: None },
                GradTargets { encoder: true, residual: true, discriminator: false, input: true },
            ),
            (
                "disc_branch",
                Scenario { alpha: None, disc_tags: Some(tags.clone()), fool_beta: None },
                GradTargets { encoder: true, residual: false, discriminator: true, input: true },
            ),
            (
                "joint",
                Scenario {
                    alpha: Some(0.5),
                    disc_tags: Some(tags.clone()),
                    fool_beta: Some(1.0),
                },
                GradTargets::all_params(),
            ),
        ];

        for (scenario_name, scenario, targets) in &scenarios {
            let (mut grads, _) =
                scenario.analytic(&config, &params, &x, &labels, &mask, train_mode, *targets);
            if options.negative_control && trial == 0 && *scenario_name == "classification" {
                // Sabotage one entry; the comparison below must notice.
                let enc = grads.encoder.as_mut().expect("encoder targeted");
                let w = enc[0].weight.data()[0];
                enc[0].weight.data_mut()[0] = w + 1e-3;
            }
            let h = options.network_step;
            for (group, grad_layers) in [
                (Group::Encoder, &grads.encoder),
                (Group::Residual, &grads.residual),
                (Group::Discriminator, &grads.discriminator),
            ] {
                let Some(grad_layers) = grad_layers else { continue };
                for (li, lg) in grad_layers.iter().enumerate() {
                    for (bias, tensor, analytic) in [
                        (false, &group.layers(&params)[li].weight, &lg.weight),
                        (true, &group.layers(&params)[li].bias, &lg.bias),
                    ] {
                        let name = format!(
                            "trial{trial}/{scenario_name}/{}.{li}.{}",
                            group.name(),
                            if bias { "bias" } else { "weight" }
                        );
                        for idx in 0..tensor.data().len() {
                            let numeric = central_difference(h, |delta| {
                                let bumped = perturbed(&params, group, li, bias, idx, delta);
                                scenario.objective(&config, &bumped, &x, &labels, &mask, train_mode)
                            });
                            rec.note(analytic.data()[idx], numeric, || format!("{name}[{idx}]"));
                        }
                    }
                }
            }
            if let Some(input_grad) = &grads.input {
                check_tensor(
                    &mut rec,
                    &format!("trial{trial}/{scenario_name}/input"),
                    &x,
                    input_grad,
                    h,
                    |bumped| scenario.objective(&config, &params, bumped, &labels, &mask, train_mode),
                );
            }
        }

        // The standalone input-gradient surface (plain cross-entropy).
        let analytic_input = input_gradient(&config, &params, &x, &labels)?;
        check_tensor(
            &mut rec,
            &format!("trial{trial}/input_gradient"),
            &x,
            &analytic_input,
            options.network_step,
            |bumped| {
                let trace = forward_classifier(&config, &params, bumped).expect("forward");
                classification_loss(trace.logits(), None, &labels, 1.0)
                    .expect("classification loss")
                    .value
            },
        );
    }

    let passed = rec.worst < options.tolerance;
    Ok(GradCheckReport {
        trials: options.trials,
        checks: rec.checks,
        worst_rel_error: rec.worst,
        worst_case: rec.worst_case,
        passed,
    })
}

fn check_loss_heads(rng: &mut RngState, rec: &mut Recorder, h: f64, trial: usize) {
    let batch = 3;
    let classes = 4;
    let real = draw(rng, batch, classes, Distribution::Uniform { low: -2.0, high: 2.0 }).expect("draw");
    let adv = draw(rng, batch, classes, Distribution::Uniform { low: -2.0, high: 2.0 }).expect("draw");
    let labels: Vec<u8> = (0..batch).map(|_| rng.next_below(classes) as u8).collect();
    let alpha = [0.0, 0.25, 0.5, 1.0][rng.next_below(4)];

    let loss = classification_loss(&real, Some(&adv), &labels, alpha).expect("loss");
    check_tensor(
        rec,
        &format!("trial{trial}/cls_loss/real"),
        &real,
        &loss.grad_real,
        h,
        |bumped| {
            classification_loss(bumped, Some(&adv), &labels, alpha)
                .expect("loss")
                .value
        },
    );
    check_tensor(
        rec,
        &format!("trial{trial}/cls_loss/adv"),
        &adv,
        loss.grad_adv.as_ref().expect("adv provided"),
        h,
        |bumped| {
            classification_loss(&real, Some(bumped), &labels, alpha)
                .expect("loss")
                .value
        },
    );

    let d_logits = draw(rng, batch, 1, Distribution::Uniform { low: -3.0, high: 3.0 }).expect("draw");
    let tags: Vec<u8> = (0..batch).map(|_| rng.next_below(2) as u8).collect();
    let (_, disc_grad) = discriminator_loss(&d_logits, &tags).expect("disc loss");
    check_tensor(
        rec,
        &format!("trial{trial}/disc_loss"),
        &d_logits,
        &disc_grad,
        h,
        |bumped| discriminator_loss(bumped, &tags).expect("disc loss").0,
    );

    let beta = [0.5, 1.0, 2.0][rng.next_below(3)];
    let (_, fool_grad) = encoder_adversarial_loss(&d_logits, beta).expect("fooling loss");
    check_tensor(
        rec,
        &format!("trial{trial}/fooling_loss"),
        &d_logits,
        &fool_grad,
        h,
        |bumped| encoder_adversarial_loss(bumped, beta).expect("fooling loss").0,
    );
}
