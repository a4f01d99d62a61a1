//! On-the-fly adversarial example generation by the fast gradient sign
//! method: one signed step of size epsilon along the input gradient of the
//! plain cross-entropy loss, optionally clamped back into the unit pixel
//! box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_classifier, input_gradient_from_trace, ForwardTrace, ModelConfig, ModelParams};
use crate::tensor::{ScalarFn, Tensor};

/// Perturbation budget and clipping policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Max-norm budget in normalized pixel units.
    pub epsilon: f64,
    /// Clamp the perturbed image back into [0,1]. Clamping only ever
    /// shrinks the step, so the max-norm bound survives it.
    pub clip_to_unit_box: bool,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = AttackConfig {
            epsilon,
            clip_to_unit_box: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "attack epsilon {} must be >= 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Perturb a batch: `x_adv = x + epsilon * sign(grad_x CE(x, y))`, computed
/// against the given parameters. Zero gradient coordinates stay untouched
/// (sign(0) = 0), and `epsilon = 0` returns the input bit for bit. Neither
/// `params` nor `x` is modified.
pub fn fgsm(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
    attack: &AttackConfig,
) -> Result<Tensor> {
    let trace = forward_classifier(config, params, x)?;
    fgsm_from_trace(config, params, &trace, labels, attack)
}

/// Same as [`fgsm`] but reusing an existing forward trace over `x`.
pub(crate) fn fgsm_from_trace(
    config: &ModelConfig,
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[u8],
    attack: &AttackConfig,
) -> Result<Tensor> {
    attack.validate()?;
    if attack.epsilon == 0.0 {
        return Ok(trace.input.clone());
    }
    let grad = input_gradient_from_trace(config, params, trace, labels)?;
    let step = grad.map(ScalarFn::Sign).scale(attack.epsilon);
    let mut out = trace.input.add(&step)?;
    // `x + eps` can round outward past the budget by one ulp; pull such
    // coordinates back so the max-norm bound holds on the stored values.
    let eps = attack.epsilon;
    for (o, &xi) in out.data_mut().iter_mut().zip(trace.input.data()) {
        while (*o - xi).abs() > eps {
            *o = if *o > xi { (*o).next_down() } else { (*o).next_up() };
        }
    }
    Ok(if attack.clip_to_unit_box {
        out.clamp01()
    } else {
        out
    })
}

/// White-box accuracy of argmax predictions on a batch and on its
/// freshly generated adversarial counterpart.
pub fn attack_success_stats(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    labels: &[u8],
    attack: &AttackConfig,
) -> Result<(f64, f64)> {
    if x.rows() == 0 {
        return Err(Error::Usage(
            "attack_success_stats on an empty batch".to_string(),
        ));
    }
    let trace = forward_classifier(config, params, x)?;
    let clean = accuracy(trace.logits(), labels)?;
    let x_adv = fgsm_from_trace(config, params, &trace, labels, attack)?;
    let adv_trace = forward_classifier(config, params, &x_adv)?;
    let adv = accuracy(adv_trace.logits(), labels)?;
    Ok((clean, adv))
}

/// Index of the row maximum; ties resolve to the first maximum.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let correct = (0..logits.rows())
        .filter(|&i| argmax_row(logits.row(i)) == labels[i] as usize)
        .count();
    Ok(correct as f64 / logits.rows() as f64)
}
