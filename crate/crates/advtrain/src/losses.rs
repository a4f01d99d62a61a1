//! Training losses in numerically stable, logits-based form.
//!
//! Every loss consumes raw logits and reduces by the batch mean, so values
//! stay finite for any finite input and the loss weights are independent of
//! batch size. Gradients are returned alongside values because each loss is
//! the head of a reverse-mode chain.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Weights of the mixed classification objective: `alpha` balances clean
/// against perturbed cross-entropy, `beta` scales the encoder's
/// discriminator-fooling term.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} must lie in [0,1]",
                self.alpha
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

/// Value and logit gradients of the mixed classification loss.
#[derive(Clone, Debug)]
pub struct ClassificationLoss {
    pub value: f64,
    pub grad_real: Tensor,
    pub grad_adv: Option<Tensor>,
}

/// Mean cross-entropy of one logits batch via max-shifted log-sum-exp.
/// Returns the per-batch mean and the gradient (softmax - onehot) * w / B.
fn cross_entropy(logits: &Tensor, labels: &[u8], weight: f64) -> Result<(f64, Tensor)> {
    let batch = logits.rows();
    let classes = logits.cols();
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch} rows",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Usage("cross_entropy on an empty batch".to_string()));
    }
    let mut grad = Tensor::zeros(batch, classes);
    let mut total = 0.0;
    let scale = weight / batch as f64;
    for i in 0..batch {
        let y = labels[i] as usize;
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[y];
        let grow = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            grow[j] = ((v - max).exp() / sum) * scale;
        }
        grow[y] -= scale;
    }
    Ok((total / batch as f64, grad))
}

/// The alpha-mixed classification loss over a real batch and its perturbed
/// counterpart: `alpha * CE(real) + (1 - alpha) * CE(adv)`. The perturbed
/// logits may be omitted only when `alpha` is exactly 1; when present at
/// `alpha = 1` their gradient is identically zero.
pub fn classification_loss(
    logits_real: &Tensor,
    logits_adv: Option<&Tensor>,
    labels: &[u8],
    alpha: f64,
) -> Result<ClassificationLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} must lie in [0,1]")));
    }
    if let Some(adv) = logits_adv {
        if adv.shape() != logits_real.shape() {
            return Err(Error::shape(
                "classification_loss",
                logits_real.shape(),
                adv.shape(),
            ));
        }
    } else if alpha != 1.0 {
        return Err(Error::Usage(format!(
            "alpha {alpha} < 1 requires perturbed logits"
        )));
    }
    let (real_ce, grad_real) = cross_entropy(logits_real, labels, alpha)?;
    let mut value = alpha * real_ce;
    let grad_adv = match logits_adv {
        Some(adv) => {
            let (adv_ce, grad) = cross_entropy(adv, labels, 1.0 - alpha)?;
            value += (1.0 - alpha) * adv_ce;
            Some(grad)
        }
        None => None,
    };
    Ok(ClassificationLoss {
        value,
        grad_real,
        grad_adv,
    })
}

/// Rowwise binary cross-entropy from logits in the stable form
/// `max(l,0) - l*t + ln(1 + exp(-|l|))`, with gradient `sigmoid(l) - t`.
/// Returns the batch mean and the mean-scaled gradient.
fn bce_with_logits(d_logits: &Tensor, tag_of: impl Fn(usize) -> f64) -> (f64, Tensor) {
    let batch = d_logits.rows();
    let mut grad = Tensor::zeros(batch, 1);
    let mut total = 0.0;
    let scale = 1.0 / batch as f64;
    for i in 0..batch {
        let l = d_logits.get(i, 0);
        let t = tag_of(i);
        total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        grad.set(i, 0, (sigmoid(l) - t) * scale);
    }
    (total * scale, grad)
}

/// Mean binary cross-entropy of the discriminator: tag 1 marks a feature
/// from real input, tag 0 a feature from a perturbed input.
pub fn discriminator_loss(d_logits: &Tensor, tags: &[u8]) -> Result<(f64, Tensor)> {
    if d_logits.cols() != 1 {
        return Err(Error::shape(
            "discriminator_loss",
            d_logits.shape(),
            (d_logits.rows(), 1),
        ));
    }
    if tags.len() != d_logits.rows() {
        return Err(Error::Data(format!(
            "{} tags for {} logits",
            tags.len(),
            d_logits.rows()
        )));
    }
    if d_logits.rows() == 0 {
        return Err(Error::Usage(
            "discriminator_loss on an empty batch".to_string(),
        ));
    }
    if let Some(bad) = tags.iter().find(|&&t| t > 1) {
        return Err(Error::Data(format!("tag {bad} is not in {{0,1}}")));
    }
    Ok(bce_with_logits(d_logits, |i| f64::from(tags[i])))
}

/// The encoder's fooling objective on perturbed features:
/// `beta * mean(-log sigmoid(l))`, the all-tags-one binary cross-entropy
/// scaled by `beta`. Gradient is `beta * (sigmoid(l) - 1) / B`. A `beta` of
/// zero disables the term exactly.
pub fn encoder_adversarial_loss(d_logits_adv: &Tensor, beta: f64) -> Result<(f64, Tensor)> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::Config(format!("beta {beta} must be >= 0")));
    }
    if d_logits_adv.cols() != 1 {
        return Err(Error::shape(
            "encoder_adversarial_loss",
            d_logits_adv.shape(),
            (d_logits_adv.rows(), 1),
        ));
    }
    if beta == 0.0 {
        return Ok((0.0, Tensor::zeros(d_logits_adv.rows(), 1)));
    }
    let (value, grad) = bce_with_logits(d_logits_adv, |_| 1.0);
    Ok((beta * value, grad.scale(beta)))
}
