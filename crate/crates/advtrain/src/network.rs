//! The augmented classifier.
//!
//! A feed-forward classifier is split at a configurable hidden layer into an
//! encoder (layers up to and including the split) and a residual part (the
//! remaining hidden layers plus the linear class head). A small binary
//! discriminator branches off the split feature and estimates the
//! probability that the feature came from an unperturbed input. Forward
//! passes record everything reverse mode needs, and `backward` returns exact
//! analytic gradients for any requested subset of {encoder, residual,
//! discriminator, input}, which is how the training losses realize their
//! stop-gradient structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{draw, Distribution, RngState};
use crate::tensor::{ScalarFn, Tensor};

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input width d.
    pub input_dim: usize,
    /// Hidden layer widths for the classifier trunk.
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    /// The encoder consists of hidden layers 1..=split_index; the
    /// discriminator reads the activation after layer `split_index`.
    pub split_index: usize,
    /// Negative-side slope of the hidden activations.
    pub leaky_slope: f64,
    /// Width of the discriminator's single hidden layer.
    pub disc_hidden: usize,
    /// Dropout rate on the discriminator hidden layer during training.
    pub disc_dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 784,
            hidden_widths: vec![512, 256, 128],
            num_classes: 10,
            split_index: 2,
            leaky_slope: 0.01,
            disc_hidden: 128,
            disc_dropout_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need input_dim >= 1 and num_classes >= 2, got {} and {}",
                self.input_dim, self.num_classes
            )));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "hidden_widths must be non-empty and positive".to_string(),
            ));
        }
        if self.split_index == 0 || self.split_index > self.hidden_widths.len() {
            return Err(Error::Config(format!(
                "split_index {} must lie in 1..={}",
                self.split_index,
                self.hidden_widths.len()
            )));
        }
        if self.disc_hidden == 0 {
            return Err(Error::Config("disc_hidden must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.disc_dropout_rate) {
            return Err(Error::Config(format!(
                "disc_dropout_rate {} must lie in [0,1)",
                self.disc_dropout_rate
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::Config(format!(
                "leaky_slope {} must lie in [0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Width k of the feature the discriminator consumes.
    pub fn feature_width(&self) -> usize {
        self.hidden_widths[self.split_index - 1]
    }

    /// Layer widths of the classifier trunk including input and class head.
    fn classifier_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.num_classes);
        dims
    }
}

/// One affine layer: `weight` is in x out, `bias` is 1 x out.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradient of one affine layer, same shapes as the layer itself.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All weights and biases, partitioned by the role they play in training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub residual: Vec<Layer>,
    pub discriminator: Vec<Layer>,
}

impl ModelParams {
    /// Iterate (name, tensor) pairs in the checkpoint payload order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, layers) in [
            ("encoder", &self.encoder),
            ("residual", &self.residual),
            ("discriminator", &self.discriminator),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &layer.weight));
                out.push((format!("{group}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.residual)
            .chain(&self.discriminator)
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

fn init_layer(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Result<Layer> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let weight = draw(
        rng,
        fan_in,
        fan_out,
        Distribution::Uniform {
            low: -bound,
            high: bound,
        },
    )?;
    Ok(Layer {
        weight,
        bias: Tensor::zeros(1, fan_out),
    })
}

/// Initialize parameters: weights uniform in (-sqrt(6/fan_in), sqrt(6/fan_in)),
/// biases zero. Draw order is fixed (encoder layers, then residual, then
/// discriminator; elements row-major), so a seed pins every weight.
pub fn init_params(config: &ModelConfig, rng: &mut RngState) -> Result<ModelParams> {
    config.validate()?;
    let dims = config.classifier_dims();
    let mut encoder = Vec::with_capacity(config.split_index);
    let mut residual = Vec::with_capacity(dims.len() - 1 - config.split_index);
    for i in 0..dims.len() - 1 {
        let layer = init_layer(dims[i], dims[i + 1], rng)?;
        if i < config.split_index {
            encoder.push(layer);
        } else {
            residual.push(layer);
        }
    }
    let k = config.feature_width();
    let discriminator = vec![
        init_layer(k, config.disc_hidden, rng)?,
        init_layer(config.disc_hidden, 1, rng)?,
    ];
    Ok(ModelParams {
        encoder,
        residual,
        discriminator,
    })
}

/// Recorded activations of one classifier forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Pre-activations per trunk layer; the last entry is the class logits.
    pub pre_activations: Vec<Tensor>,
    /// Post-activation outputs of the hidden layers.
    pub activations: Vec<Tensor>,
    /// Index into `activations` where the encoder ends.
    feature_index: usize,
    pub disc: Option<DiscTrace>,
}

impl ForwardTrace {
    /// Feature z at the split layer.
    pub fn feature(&self) -> &Tensor {
        &self.activations[self.feature_index]
    }

    /// Class logits (no softmax applied).
    pub fn logits(&self) -> &Tensor {
        self.pre_activations.last().expect("trace has layers")
    }
}

/// Recorded state of one discriminator forward pass.
#[derive(Clone, Debug)]
pub struct DiscTrace {
    /// Feature batch the discriminator consumed.
    pub input: Tensor,
    pub pre_hidden: Tensor,
    /// Hidden activation after ReLU and, in train mode, mask and rescale.
    pub hidden: Tensor,
    /// Dropout mask of {0,1}; all ones outside train mode.
    pub mask: Tensor,
    pub train_mode: bool,
    /// Logit per row; the discriminator output is sigmoid of this.
    pub logits: Tensor,
}

/// Run the classifier trunk, recording the trace reverse mode needs.
/// Inputs are expected in [0,1]; hidden layers use the leaky activation and
/// the head stays linear.
pub fn forward_classifier(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
) -> Result<ForwardTrace> {
    if x.cols() != config.input_dim {
        return Err(Error::shape(
            "forward_classifier",
            x.shape(),
            (x.rows(), config.input_dim),
        ));
    }
    let act_fn = ScalarFn::LeakyRelu(config.leaky_slope);
    let n_layers = params.encoder.len() + params.residual.len();
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut activations = Vec::with_capacity(n_layers - 1);
    let mut current = x.clone();
    for (idx, layer) in params.encoder.iter().chain(&params.residual).enumerate() {
        let pre = current.matmul(&layer.weight)?.add_row(&layer.bias)?;
        if idx + 1 < n_layers {
            current = pre.map(act_fn);
            activations.push(current.clone());
        }
        pre_activations.push(pre);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre_activations,
        activations,
        feature_index: params.encoder.len() - 1,
        disc: None,
    })
}

/// Run the discriminator on a feature batch. In train mode a fresh
/// Bernoulli(1 - rate) mask is drawn from `rng` and surviving hidden units
/// are scaled by 1/(1 - rate), so evaluation needs no rescaling. A rate of
/// zero consumes no randomness and matches eval mode exactly.
pub fn forward_discriminator(
    config: &ModelConfig,
    params: &ModelParams,
    z: &Tensor,
    train_mode: bool,
    rng: &mut RngState,
) -> Result<DiscTrace> {
    let rate = config.disc_dropout_rate;
    let mask = if train_mode && rate > 0.0 {
        draw(
            rng,
            z.rows(),
            config.disc_hidden,
            Distribution::Bernoulli { p: 1.0 - rate },
        )?
    } else {
        Tensor::filled(z.rows(), config.disc_hidden, 1.0)
    };
    forward_discriminator_masked(config, params, z, train_mode, mask)
}

/// Discriminator forward with a caller-supplied mask; the path every
/// train-mode pass takes once its mask is drawn. Exposed so gradient
/// checking can re-evaluate the network under a frozen mask.
pub fn forward_discriminator_masked(
    config: &ModelConfig,
    params: &ModelParams,
    z: &Tensor,
    train_mode: bool,
    mask: Tensor,
) -> Result<DiscTrace> {
    if z.cols() != config.feature_width() {
        return Err(Error::shape(
            "forward_discriminator",
            z.shape(),
            (z.rows(), config.feature_width()),
        ));
    }
    let rate = config.disc_dropout_rate;
    let hidden_layer = &params.discriminator[0];
    let out_layer = &params.discriminator[1];
    let pre_hidden = z.matmul(&hidden_layer.weight)?.add_row(&hidden_layer.bias)?;
    let mut hidden = pre_hidden.map(ScalarFn::Relu);
    if train_mode && rate > 0.0 {
        hidden = hidden.hadamard(&mask)?.scale(1.0 / (1.0 - rate));
    }
    let logits = hidden.matmul(&out_layer.weight)?.add_row(&out_layer.bias)?;
    Ok(DiscTrace {
        input: z.clone(),
        pre_hidden,
        hidden,
        mask,
        train_mode,
        logits,
    })
}

/// Attach a discriminator pass over the trace's own feature batch.
pub fn attach_discriminator(
    trace: &mut ForwardTrace,
    config: &ModelConfig,
    params: &ModelParams,
    train_mode: bool,
    rng: &mut RngState,
) -> Result<()> {
    let z = trace.feature().clone();
    trace.disc = Some(forward_discriminator(config, params, &z, train_mode, rng)?);
    Ok(())
}

/// Which parameter groups (and optionally the input) to differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradTargets {
    pub encoder: bool,
    pub residual: bool,
    pub discriminator: bool,
    pub input: bool,
}

impl GradTargets {
    pub fn all_params() -> Self {
        GradTargets {
            encoder: true,
            residual: true,
            discriminator: true,
            input: false,
        }
    }

    pub fn classifier() -> Self {
        GradTargets {
            encoder: true,
            residual: true,
            ..Self::default()
        }
    }
}

/// Loss gradients flowing into the recorded outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct UpstreamGradients<'a> {
    /// d loss / d class logits.
    pub logits: Option<&'a Tensor>,
    /// d loss / d discriminator logits.
    pub disc_logits: Option<&'a Tensor>,
}

/// Gradients for exactly the requested targets; untargeted groups are None.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub encoder: Option<Vec<LayerGrads>>,
    pub residual: Option<Vec<LayerGrads>>,
    pub discriminator: Option<Vec<LayerGrads>>,
    pub input: Option<Tensor>,
}

impl Gradients {
    /// Elementwise sum of two gradient sets with identical target layout.
    pub fn accumulate(mut self, other: &Gradients) -> Result<Gradients> {
        fn merge(a: &mut Option<Vec<LayerGrads>>, b: &Option<Vec<LayerGrads>>) -> Result<()> {
            match (a.as_mut(), b) {
                (Some(av), Some(bv)) => {
                    for (ag, bg) in av.iter_mut().zip(bv) {
                        ag.weight = ag.weight.add(&bg.weight)?;
                        ag.bias = ag.bias.add(&bg.bias)?;
                    }
                    Ok(())
                }
                (None, None) => Ok(()),
                _ => Err(Error::Usage(
                    "cannot sum gradients with different targets".to_string(),
                )),
            }
        }
        merge(&mut self.encoder, &other.encoder)?;
        merge(&mut self.residual, &other.residual)?;
        merge(&mut self.discriminator, &other.discriminator)?;
        self.input = match (self.input.take(), &other.input) {
            (Some(a), Some(b)) => Some(a.add(b)?),
            (None, None) => None,
            _ => {
                return Err(Error::Usage(
                    "cannot sum gradients with different targets".to_string(),
                ))
            }
        };
        Ok(self)
    }
}

/// Derivative of the leaky activation at a recorded pre-activation. Exactly
/// zero takes the positive branch.
fn leaky_derivative(pre: &Tensor, slope: f64) -> Tensor {
    let data = pre
        .data()
        .iter()
        .map(|&v| if v < 0.0 { slope } else { 1.0 })
        .collect();
    Tensor::from_vec(pre.rows(), pre.cols(), data).expect("finite derivative data")
}

fn relu_derivative(pre: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .map(|&v| if v < 0.0 { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(pre.rows(), pre.cols(), data).expect("finite derivative data")
}

fn affine_grads(input: &Tensor, delta: &Tensor) -> Result<LayerGrads> {
    Ok(LayerGrads {
        weight: input.transpose().matmul(delta)?,
        bias: delta.column_sums(),
    })
}

/// Gradient of the discriminator alone: propagates `grad_logits` back
/// through the recorded pass, reusing the stored dropout mask. Returns the
/// layer gradients when `want_params` and the gradient with respect to the
/// feature input when `want_input`.
pub fn backward_discriminator(
    config: &ModelConfig,
    params: &ModelParams,
    trace: &DiscTrace,
    grad_logits: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<(Option<Vec<LayerGrads>>, Option<Tensor>)> {
    if grad_logits.shape() != trace.logits.shape() {
        return Err(Error::shape(
            "backward_discriminator",
            grad_logits.shape(),
            trace.logits.shape(),
        ));
    }
    let out_layer = &params.discriminator[1];
    let out_grads = if want_params {
        Some(affine_grads(&trace.hidden, grad_logits)?)
    } else {
        None
    };
    // Through the hidden layer: undo affine, dropout scaling, then ReLU.
    let mut delta = grad_logits.matmul(&out_layer.weight.transpose())?;
    if trace.train_mode && config.disc_dropout_rate > 0.0 {
        delta = delta
            .hadamard(&trace.mask)?
            .scale(1.0 / (1.0 - config.disc_dropout_rate));
    }
    delta = delta.hadamard(&relu_derivative(&trace.pre_hidden))?;
    let hidden_grads = if want_params {
        Some(affine_grads(&trace.input, &delta)?)
    } else {
        None
    };
    let input_grad = if want_input {
        Some(delta.matmul(&params.discriminator[0].weight.transpose())?)
    } else {
        None
    };
    let layer_grads = match (hidden_grads, out_grads) {
        (Some(h), Some(o)) => Some(vec![h, o]),
        _ => None,
    };
    Ok((layer_grads, input_grad))
}

/// Exact reverse-mode gradients of the recorded composition for exactly the
/// requested targets. The discriminator path requires a discriminator pass
/// in the trace; asking for one without it is a usage error.
pub fn backward(
    config: &ModelConfig,
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: UpstreamGradients<'_>,
    targets: GradTargets,
) -> Result<Gradients> {
    let needs_disc = targets.discriminator || upstream.disc_logits.is_some();
    if needs_disc && trace.disc.is_none() {
        return Err(Error::Usage(
            "discriminator gradients requested but the trace has no discriminator forward"
                .to_string(),
        ));
    }
    let slope = config.leaky_slope;
    let enc_len = params.encoder.len();
    let want_below_split = targets.encoder || targets.input;
    let mut grads = Gradients::default();

    // Discriminator branch first: it may feed a gradient into the feature.
    let mut feature_grad: Option<Tensor> = None;
    if let (Some(disc_trace), Some(g)) = (&trace.disc, upstream.disc_logits) {
        let (layer_grads, input_grad) = backward_discriminator(
            config,
            params,
            disc_trace,
            g,
            targets.discriminator,
            want_below_split,
        )?;
        grads.discriminator = layer_grads;
        feature_grad = input_grad;
    } else if targets.discriminator {
        // Targeted but no upstream gradient flows into the branch.
        let zero = trace
            .disc
            .as_ref()
            .map(|d| {
                let zeros = Tensor::zeros(d.logits.rows(), d.logits.cols());
                backward_discriminator(config, params, d, &zeros, true, false)
            })
            .transpose()?;
        grads.discriminator = zero.and_then(|(l, _)| l);
    }

    // Residual chain from the class logits down to the feature.
    if upstream.logits.is_some() || targets.residual {
        let n_res = params.residual.len();
        let mut res_grads: Vec<Option<LayerGrads>> = (0..n_res).map(|_| None).collect();
        let mut delta_to_feature: Option<Tensor> = None;
        if let Some(g) = upstream.logits {
            if g.shape() != trace.logits().shape() {
                return Err(Error::shape(
                    "backward",
                    g.shape(),
                    trace.logits().shape(),
                ));
            }
            let mut delta = g.clone();
            for idx in (0..n_res).rev() {
                let trunk_idx = enc_len + idx;
                let layer_input = if trunk_idx == 0 {
                    &trace.input
                } else {
                    &trace.activations[trunk_idx - 1]
                };
                if targets.residual {
                    res_grads[idx] = Some(affine_grads(layer_input, &delta)?);
                }
                let reaches_feature = idx > 0 || want_below_split;
                if reaches_feature {
                    delta = delta.matmul(&params.residual[idx].weight.transpose())?;
                    if idx > 0 {
                        // Activation between residual layers.
                        delta = delta
                            .hadamard(&leaky_derivative(&trace.pre_activations[trunk_idx - 1], slope))?;
                    }
                } else {
                    break;
                }
            }
            if want_below_split {
                delta_to_feature = Some(delta);
            }
        } else if targets.residual {
            // Zero upstream on the logits: residual gradients are zero.
            for (idx, slot) in res_grads.iter_mut().enumerate() {
                let layer = &params.residual[idx];
                *slot = Some(LayerGrads {
                    weight: Tensor::zeros(layer.weight.rows(), layer.weight.cols()),
                    bias: Tensor::zeros(1, layer.bias.cols()),
                });
            }
        }
        if targets.residual {
            grads.residual = Some(res_grads.into_iter().map(|g| g.expect("filled")).collect());
        }
        if let Some(d) = delta_to_feature {
            feature_grad = Some(match feature_grad {
                Some(existing) => existing.add(&d)?,
                None => d,
            });
        }
    }

    // Encoder chain from the feature down to the input.
    if want_below_split {
        let mut delta = match feature_grad {
            Some(d) => d,
            None => Tensor::zeros(trace.feature().rows(), trace.feature().cols()),
        };
        let mut enc_grads: Vec<Option<LayerGrads>> = (0..enc_len).map(|_| None).collect();
        for idx in (0..enc_len).rev() {
            // The feature is an activation output, so the activation
            // derivative applies before each encoder layer's affine part.
            delta = delta.hadamard(&leaky_derivative(&trace.pre_activations[idx], slope))?;
            let layer_input = if idx == 0 {
                &trace.input
            } else {
                &trace.activations[idx - 1]
            };
            if targets.encoder {
                enc_grads[idx] = Some(affine_grads(layer_input, &delta)?);
            }
            if idx > 0 || targets.input {
                delta = delta.matmul(&params.encoder[idx].weight.transpose())?;
            }
        }
        if targets.encoder {
            grads.encoder = Some(enc_grads.into_iter().map(|g| g.expect("filled")).collect());
        }
        if targets.input {
            grads.input = Some(delta);
        }
    }

    Ok(grads)
}

/// Gradient of the plain cross-entropy loss with respect to the input
/// batch. No loss mixing and no discriminator: this is the quantity the
/// gradient-sign attack consumes.
pub fn input_gradient(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
) -> Result<Tensor> {
    let trace = forward_classifier(config, params, x)?;
    input_gradient_from_trace(config, params, &trace, labels)
}

/// Same as [`input_gradient`] but reusing an existing forward trace.
pub(crate) fn input_gradient_from_trace(
    config: &ModelConfig,
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[u8],
) -> Result<Tensor> {
    let loss = crate::losses::classification_loss(trace.logits(), None, labels, 1.0)?;
    let grads = backward(
        config,
        params,
        trace,
        UpstreamGradients {
            logits: Some(&loss.grad_real),
            disc_logits: None,
        },
        GradTargets {
            input: true,
            ..GradTargets::default()
        },
    )?;
    Ok(grads.input.expect("input gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            hidden_widths: vec![2],
            num_classes: 2,
            split_index: 1,
            leaky_slope: 0.5,
            disc_hidden: 2,
            disc_dropout_rate: 0.5,
        }
    }

    fn tiny_params() -> ModelParams {
        ModelParams {
            encoder: vec![Layer {
                weight: Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]),
                bias: Tensor::from_rows(&[vec![0.5, -0.25]]),
            }],
            residual: vec![Layer {
                weight: Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]),
                bias: Tensor::from_rows(&[vec![0.5, -1.0]]),
            }],
            discriminator: vec![
                Layer {
                    weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
                    bias: Tensor::zeros(1, 2),
                },
                Layer {
                    weight: Tensor::from_rows(&[vec![1.0], vec![-1.0]]),
                    bias: Tensor::zeros(1, 1),
                },
            ],
        }
    }

    #[test]
    fn default_config_layer_shapes() {
        let config = ModelConfig::default();
        let params = init_params(&config, &mut RngState::new(0)).unwrap();
        let shapes: Vec<(usize, usize)> = params
            .encoder
            .iter()
            .chain(&params.residual)
            .chain(&params.discriminator)
            .map(|l| l.weight.shape())
            .collect();
        assert_eq!(
            shapes,
            vec![(784, 512), (512, 256), (256, 128), (128, 10), (256, 128), (128, 1)]
        );
        assert_eq!(params.encoder.len(), 2);
        assert_eq!(params.residual.len(), 2);
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let config = ModelConfig::default();
        let a = init_params(&config, &mut RngState::new(7)).unwrap();
        let b = init_params(&config, &mut RngState::new(7)).unwrap();
        assert_eq!(a, b);
        for layer in a.encoder.iter().chain(&a.residual).chain(&a.discriminator) {
            assert!(layer.bias.data().iter().all(|&v| v == 0.0));
        }
        // Init bound check: every weight within sqrt(6/fan_in).
        let bound = (6.0f64 / 784.0).sqrt();
        assert!(a.encoder[0].weight.data().iter().all(|&w| w.abs() < bound));
    }

    #[test]
    fn forward_zero_params_gives_zero_outputs() {
        let config = tiny_config();
        let params = ModelParams {
            encoder: vec![Layer {
                weight: Tensor::zeros(2, 2),
                bias: Tensor::zeros(1, 2),
            }],
            residual: vec![Layer {
                weight: Tensor::zeros(2, 2),
                bias: Tensor::zeros(1, 2),
            }],
            discriminator: tiny_params().discriminator,
        };
        let x = Tensor::from_rows(&[vec![0.3, 0.8]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        assert!(trace.logits().data().iter().all(|&v| v == 0.0));
        assert!(trace.feature().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_hand_computation() {
        // pre1 = x W1 + b1 = [5.5, -0.25]; leaky(0.5) -> [5.5, -0.125]
        // logits = a1 W2 + b2 = [11.375, 4.125]; all dyadic, so exact.
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        assert_eq!(trace.feature().data(), &[5.5, -0.125]);
        assert_eq!(trace.logits().data(), &[11.375, 4.125]);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![0.4, 0.9], vec![0.4, 0.9]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        assert_eq!(trace.logits().row(0), trace.logits().row(1));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            forward_classifier(&config, &params, &x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn discriminator_zero_params_outputs_half() {
        let config = tiny_config();
        let mut params = tiny_params();
        params.discriminator = vec![
            Layer {
                weight: Tensor::zeros(2, 2),
                bias: Tensor::zeros(1, 2),
            },
            Layer {
                weight: Tensor::zeros(2, 1),
                bias: Tensor::zeros(1, 1),
            },
        ];
        let z = Tensor::from_rows(&[vec![3.0, -4.0]]);
        let trace =
            forward_discriminator(&config, &params, &z, false, &mut RngState::new(0)).unwrap();
        assert_eq!(trace.logits.data(), &[0.0]);
        assert_eq!(crate::tensor::sigmoid(trace.logits.get(0, 0)), 0.5);
        assert!(trace.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_rate_zero_matches_eval() {
        let mut config = tiny_config();
        config.disc_dropout_rate = 0.0;
        let params = tiny_params();
        let z = Tensor::from_rows(&[vec![0.7, -0.2], vec![1.3, 0.4]]);
        let mut rng = RngState::new(5);
        let train = forward_discriminator(&config, &params, &z, true, &mut rng).unwrap();
        let eval = forward_discriminator(&config, &params, &z, false, &mut rng).unwrap();
        assert_eq!(train.logits, eval.logits);
        assert_eq!(train.hidden, eval.hidden);
    }

    #[test]
    fn dropout_matches_manual_mask_application() {
        let config = tiny_config();
        let params = tiny_params();
        let z = Tensor::from_rows(&[vec![0.7, 0.2], vec![1.3, 0.4], vec![0.1, 0.9]]);
        // Draw with the same seed the forward will use, then apply by hand.
        let mask = draw(
            &mut RngState::new(11),
            3,
            2,
            Distribution::Bernoulli { p: 0.5 },
        )
        .unwrap();
        let trace =
            forward_discriminator(&config, &params, &z, true, &mut RngState::new(11)).unwrap();
        assert_eq!(trace.mask, mask);
        let manual_hidden = z
            .matmul(&params.discriminator[0].weight)
            .unwrap()
            .add_row(&params.discriminator[0].bias)
            .unwrap()
            .map(ScalarFn::Relu)
            .hadamard(&mask)
            .unwrap()
            .scale(2.0);
        let manual_logits = manual_hidden
            .matmul(&params.discriminator[1].weight)
            .unwrap()
            .add_row(&params.discriminator[1].bias)
            .unwrap();
        assert_eq!(trace.logits, manual_logits);
    }

    #[test]
    fn backward_respects_targets() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![0.2, 0.6]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, -1.0]]);
        let grads = backward(
            &config,
            &params,
            &trace,
            UpstreamGradients {
                logits: Some(&g),
                disc_logits: None,
            },
            GradTargets {
                encoder: true,
                ..GradTargets::default()
            },
        )
        .unwrap();
        assert!(grads.encoder.is_some());
        assert!(grads.residual.is_none());
        assert!(grads.discriminator.is_none());
        assert!(grads.input.is_none());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![0.2, 0.6]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        let g = Tensor::zeros(1, 2);
        let grads = backward(
            &config,
            &params,
            &trace,
            UpstreamGradients {
                logits: Some(&g),
                disc_logits: None,
            },
            GradTargets {
                encoder: true,
                residual: true,
                input: true,
                ..GradTargets::default()
            },
        )
        .unwrap();
        for lg in grads.encoder.unwrap().iter().chain(grads.residual.unwrap().iter()) {
            assert!(lg.weight.data().iter().all(|&v| v == 0.0));
            assert!(lg.bias.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disc_targets_without_disc_trace_is_usage_error() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![0.2, 0.6]]);
        let trace = forward_classifier(&config, &params, &x).unwrap();
        let err = backward(
            &config,
            &params,
            &trace,
            UpstreamGradients::default(),
            GradTargets {
                discriminator: true,
                ..GradTargets::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn identical_rows_identical_input_gradients() {
        let config = tiny_config();
        let params = tiny_params();
        let x = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        let g = input_gradient(&config, &params, &x, &[1, 1]).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    #[test]
    fn permuting_rows_permutes_outputs_and_gradients() {
        let config = ModelConfig {
            input_dim: 5,
            hidden_widths: vec![4, 3],
            num_classes: 3,
            split_index: 1,
            ..ModelConfig::default()
        };
        let params = init_params(&config, &mut RngState::new(21)).unwrap();
        let x = crate::rng::draw(
            &mut RngState::new(22),
            4,
            5,
            Distribution::Uniform { low: 0.0, high: 1.0 },
        )
        .unwrap();
        let labels = [0u8, 2, 1, 0];
        let perm = [2usize, 0, 3, 1];
        let x_perm = x.select_rows(&perm);
        let labels_perm: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();

        let logits = forward_classifier(&config, &params, &x).unwrap();
        let logits_perm = forward_classifier(&config, &params, &x_perm).unwrap();
        assert_eq!(logits.logits().select_rows(&perm), *logits_perm.logits());

        let grad = input_gradient(&config, &params, &x, &labels).unwrap();
        let grad_perm = input_gradient(&config, &params, &x_perm, &labels_perm).unwrap();
        assert_eq!(grad.select_rows(&perm), grad_perm);
    }
}
