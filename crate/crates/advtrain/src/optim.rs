//! Adaptive-moment gradient descent.
//!
//! The classifier (encoder + residual) and the discriminator are separate
//! optimizer groups with independent step counters, so training one never
//! perturbs the other's state. Moments mirror the parameter shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, LayerGrads, ModelParams};
use crate::tensor::Tensor;

/// Optimizer constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must lie in [0,1)")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "adam epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamMoments {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamMoments {
    fn zeros_like(t: &Tensor) -> AdamMoments {
        AdamMoments {
            m: Tensor::zeros(t.rows(), t.cols()),
            v: Tensor::zeros(t.rows(), t.cols()),
        }
    }
}

/// Bias-corrected adaptive-moment update of one tensor in place:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, then
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)` with `x_hat = x / (1 - b^t)`.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut AdamMoments,
    step: u64,
    config: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_update", param.shape(), grad.shape()));
    }
    debug_assert!(step >= 1);
    let m_corr = 1.0 - config.beta1.powi(step as i32);
    let v_corr = 1.0 - config.beta2.powi(step as i32);
    let pd = param.data_mut();
    let gd = grad.data();
    let md = moments.m.data_mut();
    let vd = moments.v.data_mut();
    for i in 0..pd.len() {
        let g = gd[i];
        md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * g;
        vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * g * g;
        let m_hat = md[i] / m_corr;
        let v_hat = vd[i] / v_corr;
        pd[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        if !pd[i].is_finite() {
            return Err(Error::Data(format!(
                "parameter became non-finite at step {step}"
            )));
        }
    }
    Ok(())
}

/// Moments for a sequence of layers.
#[derive(Clone, Debug)]
pub struct LayerMoments {
    pub weight: AdamMoments,
    pub bias: AdamMoments,
}

/// Optimizer state for the whole model: classifier and discriminator keep
/// independent step counters and moment banks.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub classifier_step: u64,
    pub discriminator_step: u64,
    pub encoder: Vec<LayerMoments>,
    pub residual: Vec<LayerMoments>,
    pub discriminator: Vec<LayerMoments>,
}

fn moments_for(layers: &[Layer]) -> Vec<LayerMoments> {
    layers
        .iter()
        .map(|l| LayerMoments {
            weight: AdamMoments::zeros_like(&l.weight),
            bias: AdamMoments::zeros_like(&l.bias),
        })
        .collect()
}

fn update_group(
    layers: &mut [Layer],
    grads: &[LayerGrads],
    moments: &mut [LayerMoments],
    step: u64,
    config: &AdamConfig,
) -> Result<()> {
    if layers.len() != grads.len() {
        return Err(Error::Usage(format!(
            "{} gradients for {} layers",
            grads.len(),
            layers.len()
        )));
    }
    for ((layer, grad), mom) in layers.iter_mut().zip(grads).zip(moments) {
        adam_update(&mut layer.weight, &grad.weight, &mut mom.weight, step, config)?;
        adam_update(&mut layer.bias, &grad.bias, &mut mom.bias, step, config)?;
    }
    Ok(())
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Result<OptimizerState> {
        config.validate()?;
        Ok(OptimizerState {
            config,
            classifier_step: 0,
            discriminator_step: 0,
            encoder: moments_for(&params.encoder),
            residual: moments_for(&params.residual),
            discriminator: moments_for(&params.discriminator),
        })
    }

    /// One optimizer step over encoder and residual parameters.
    pub fn update_classifier(
        &mut self,
        params: &mut ModelParams,
        encoder_grads: &[LayerGrads],
        residual_grads: &[LayerGrads],
    ) -> Result<()> {
        self.classifier_step += 1;
        let config = self.config;
        update_group(
            &mut params.encoder,
            encoder_grads,
            &mut self.encoder,
            self.classifier_step,
            &config,
        )?;
        update_group(
            &mut params.residual,
            residual_grads,
            &mut self.residual,
            self.classifier_step,
            &config,
        )
    }

    /// One optimizer step over the discriminator parameters only.
    pub fn update_discriminator(
        &mut self,
        params: &mut ModelParams,
        grads: &[LayerGrads],
    ) -> Result<()> {
        self.discriminator_step += 1;
        let config = self.config;
        update_group(
            &mut params.discriminator,
            grads,
            &mut self.discriminator,
            self.discriminator_step,
            &config,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let config = AdamConfig::default();
        let mut param = Tensor::from_rows(&[vec![1.5, -2.5]]);
        let before = param.clone();
        let grad = Tensor::zeros(1, 2);
        let mut moments = AdamMoments::zeros_like(&param);
        for step in 1..=100 {
            adam_update(&mut param, &grad, &mut moments, step, &config).unwrap();
        }
        assert_eq!(param, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate_sign() {
        // With constant gradient g: m_hat = g, v_hat = g^2, so the first
        // update is -lr * g / (|g| + eps) which is -lr * sign(g) up to eps.
        let config = AdamConfig::default();
        let mut param = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let grad = Tensor::from_rows(&[vec![0.5, -3.0, 1e-4]]);
        let mut moments = AdamMoments::zeros_like(&param);
        adam_update(&mut param, &grad, &mut moments, 1, &config).unwrap();
        for (i, &g) in grad.data().iter().enumerate() {
            let expected = -config.learning_rate * g / (g.abs() + config.epsilon);
            let got = param.data()[i];
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs(),
                "coordinate {i}: {got} vs {expected}"
            );
            assert!((got + config.learning_rate * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn moments_stay_finite_long_run() {
        let config = AdamConfig::default();
        let mut param = Tensor::from_rows(&[vec![0.3]]);
        let mut moments = AdamMoments::zeros_like(&param);
        let mut wobble = 1.0;
        for step in 1..=100_000u64 {
            // Bounded, sign-alternating gradient stream.
            wobble = -wobble;
            let grad = Tensor::from_rows(&[vec![wobble * (1.0 + (step % 7) as f64)]]);
            adam_update(&mut param, &grad, &mut moments, step, &config).unwrap();
        }
        assert!(param.all_finite());
        assert!(moments.m.all_finite() && moments.v.all_finite());
    }

    #[test]
    fn shape_mismatch_is_fatal() {
        let config = AdamConfig::default();
        let mut param = Tensor::zeros(2, 2);
        let grad = Tensor::zeros(2, 3);
        let mut moments = AdamMoments::zeros_like(&param);
        assert!(adam_update(&mut param, &grad, &mut moments, 1, &config).is_err());
    }
}
