//! Deterministic training toolkit for feed-forward image classifiers
//! hardened against gradient-sign perturbations.
//!
//! The classifier is split at a hidden layer into an encoder and a residual
//! part, and a small binary discriminator watches the feature at the split,
//! learning to tell features of clean inputs from features of perturbed
//! ones. Training the encoder to fool that discriminator pushes the
//! representation to be invariant to the perturbation, which transfers to
//! robustness of the class predictions. Four regimes are supported through
//! one pair of loss weights: plain training, mixed clean/perturbed
//! cross-entropy, fooling-loss training, and the combination of the last
//! two.
//!
//! Everything is built for reproducibility: one fixed random generator
//! seeded per purpose, fixed summation order in the matrix kernels, and
//! bit-exact checkpoint round-trips. Two runs with the same seed, config,
//! and data produce identical bytes.

#![allow(clippy::needless_range_loop)]

pub mod attack;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod losses;
mod matmul;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attack::{attack_success_stats, fgsm, AttackConfig};
pub use checkpoint::{load_checkpoint, parse_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes};
pub use dataset::{
    batches, load_idx, load_mnist_dir, make_synthetic, parse_idx_images, parse_idx_labels,
    split_train_validation, DatasetSplit, SplitName, SyntheticSpec,
};
pub use error::{Error, Result};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
pub use losses::{classification_loss, discriminator_loss, encoder_adversarial_loss, LossWeights};
pub use network::{
    backward, forward_classifier, forward_discriminator, init_params, input_gradient,
    ForwardTrace, GradTargets, Gradients, ModelConfig, ModelParams, UpstreamGradients,
};
pub use optim::{adam_update, AdamConfig, OptimizerState};
pub use rng::{draw, Distribution, RngState};
pub use tensor::{ScalarFn, Tensor};
pub use training::{
    classifier_substep, discriminator_substep, evaluate, prepare_batch, train, train_step,
    train_with_observer, EpochMetrics, EvalMetrics, MetricsHistory, PreparedBatch, TrainConfig,
    TrainMode,
};
