//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `-- --nocapture` to see them).
//!
//! The full-dataset criteria need the four uncompressed MNIST IDX files;
//! point the MNIST_DIR environment variable at the directory holding them.
//! Without it those criteria report SKIPPED. The full run performs twelve
//! 20-epoch trainings plus one repeat, so use a release build:
//!
//!   MNIST_DIR=... cargo test --release -p advtrain --test acceptance -- --nocapture

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use advtrain::dataset::split_train_validation;
use advtrain::{
    batches, classification_loss, classifier_substep, discriminator_substep, draw, evaluate,
    fgsm, forward_classifier, init_params, load_mnist_dir, make_synthetic, prepare_batch,
    run_gradcheck, train, write_checkpoint_bytes, AttackConfig, DatasetSplit, Distribution,
    GradCheckConfig, GradTargets, ModelConfig, ModelParams, OptimizerState, RngState,
    SyntheticSpec, TrainConfig, TrainMode, UpstreamGradients,
};

fn check(criterion: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("{verdict} {criterion}: {detail}");
    assert!(ok, "{criterion}: {detail}");
}

fn skip(criterion: &str) {
    println!("SKIPPED {criterion}: set MNIST_DIR to the directory with the four IDX files");
}

// ---------------------------------------------------------------------------
// Criterion 1: every analytic gradient survives 50 randomized trials of
// central finite differences with worst relative error below 1e-5, in under
// a minute.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_verification() {
    let start = Instant::now();
    let report = run_gradcheck(&GradCheckConfig {
        seed: 2024,
        trials: 50,
        ..GradCheckConfig::default()
    })
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion 1 (gradient verification)",
        report.passed && elapsed < 60.0,
        &format!(
            "{} comparisons over {} trials, worst relative error {:.3e} at {}, {:.1}s",
            report.checks, report.trials, report.worst_rel_error, report.worst_case, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: full-dataset accuracy bands for the four regimes, mean over
// three seeds at evaluation budget 0.1.
// ---------------------------------------------------------------------------

struct RunOutcome {
    mode: TrainMode,
    seed: u64,
    test_real: f64,
    test_adv: f64,
    metrics_csv: String,
    checkpoint: Vec<u8>,
    wall_seconds: f64,
}

struct MnistContext {
    train_data: DatasetSplit,
    test_data: DatasetSplit,
    runs: Vec<RunOutcome>,
}

const TABLE_SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_EPSILON: f64 = 0.1;

fn run_one(
    ctx_train: &DatasetSplit,
    ctx_test: &DatasetSplit,
    mode: TrainMode,
    seed: u64,
) -> RunOutcome {
    let model = ModelConfig::default();
    let mut config = TrainConfig::for_mode(mode);
    config.seed = seed;
    let start = Instant::now();
    let (params, history) = train(&config, &model, ctx_train).unwrap();
    let wall_seconds = start.elapsed().as_secs_f64();
    let m = evaluate(&model, &params, ctx_test, EVAL_EPSILON, true).unwrap();
    println!(
        "  run mode={} seed={seed}: test real {:.4} adv {:.4} ({:.0}s)",
        mode.as_str(),
        m.real_acc,
        m.adv_acc,
        wall_seconds
    );
    RunOutcome {
        mode,
        seed,
        test_real: m.real_acc,
        test_adv: m.adv_acc,
        metrics_csv: history.to_csv(),
        checkpoint: write_checkpoint_bytes(&params, &model).unwrap(),
        wall_seconds,
    }
}

fn mnist_context() -> Option<&'static Arc<MnistContext>> {
    static CTX: OnceLock<Option<Arc<MnistContext>>> = OnceLock::new();
    CTX.get_or_init(|| {
        let dir: PathBuf = std::env::var_os("MNIST_DIR")?.into();
        let (train_data, test_data) = load_mnist_dir(&dir).expect("loading MNIST files");
        let mut runs = Vec::new();
        for mode in [TrainMode::Simple, TrainMode::At, TrainMode::A2t, TrainMode::A3t] {
            for seed in TABLE_SEEDS {
                runs.push(run_one(&train_data, &test_data, mode, seed));
            }
        }
        Some(Arc::new(MnistContext {
            train_data,
            test_data,
            runs,
        }))
    })
    .as_ref()
}

fn mode_means(ctx: &MnistContext, mode: TrainMode) -> (f64, f64) {
    let of_mode: Vec<&RunOutcome> = ctx.runs.iter().filter(|r| r.mode == mode).collect();
    let n = of_mode.len() as f64;
    (
        of_mode.iter().map(|r| r.test_real).sum::<f64>() / n,
        of_mode.iter().map(|r| r.test_adv).sum::<f64>() / n,
    )
}

#[test]
fn criterion_2_training_regime_accuracy_bands() {
    let Some(ctx) = mnist_context() else {
        skip("criterion 2 (accuracy bands)");
        return;
    };
    let (simple_real, simple_adv) = mode_means(ctx, TrainMode::Simple);
    let (at_real, at_adv) = mode_means(ctx, TrainMode::At);
    let (a2t_real, a2t_adv) = mode_means(ctx, TrainMode::A2t);
    let (a3t_real, a3t_adv) = mode_means(ctx, TrainMode::A3t);
    let slowest = ctx
        .runs
        .iter()
        .map(|r| r.wall_seconds)
        .fold(0.0, f64::max);

    println!("  mode    mean real  mean adv   (eval epsilon {EVAL_EPSILON}, seeds {TABLE_SEEDS:?})");
    for (name, real, adv) in [
        ("simple", simple_real, simple_adv),
        ("at", at_real, at_adv),
        ("a2t", a2t_real, a2t_adv),
        ("a3t", a3t_real, a3t_adv),
    ] {
        println!("  {name:<7} {real:.4}     {adv:.4}");
    }
    println!("  slowest single run: {slowest:.0}s");

    check(
        "criterion 2a (simple bands)",
        simple_real >= 0.97 && simple_adv <= 0.60 && simple_real - simple_adv >= 0.30,
        &format!("real {simple_real:.4} (>= 0.97), adv {simple_adv:.4} (<= 0.60, >= 30 points below real)"),
    );
    check(
        "criterion 2b (at bands)",
        at_real >= 0.975 && at_adv >= 0.88,
        &format!("real {at_real:.4} (>= 0.975), adv {at_adv:.4} (>= 0.88)"),
    );
    check(
        "criterion 2c (a2t bands)",
        a2t_real >= 0.965 && a2t_adv >= 0.80,
        &format!("real {a2t_real:.4} (>= 0.965), adv {a2t_adv:.4} (>= 0.80)"),
    );
    check(
        "criterion 2d (a3t bands and ordering)",
        a3t_real >= 0.975 && a3t_adv >= 0.90 && a3t_adv >= at_adv.max(a2t_adv) - 0.015,
        &format!(
            "real {a3t_real:.4} (>= 0.975), adv {a3t_adv:.4} (>= 0.90, >= max(at, a2t) - 1.5 points = {:.4})",
            at_adv.max(a2t_adv) - 0.015
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: the perturbation respects its max-norm budget exactly, stays
// in the unit box under clipping, and is the identity at budget zero, over
// 10,000 random inputs and 20 random models, in under a minute.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_perturbation_invariants() {
    let start = Instant::now();
    let mut rng = RngState::new(33);
    let mut checked_inputs = 0usize;
    for model_idx in 0..20u64 {
        let config = ModelConfig {
            input_dim: 6 + rng.next_below(10),
            hidden_widths: vec![5 + rng.next_below(6), 4 + rng.next_below(4)],
            num_classes: 2 + rng.next_below(8),
            split_index: 1 + rng.next_below(2),
            leaky_slope: 0.01,
            disc_hidden: 4,
            disc_dropout_rate: 0.5,
        };
        let params = init_params(&config, &mut RngState::new(1000 + model_idx)).unwrap();
        let batch = 500;
        let x = draw(
            &mut rng,
            batch,
            config.input_dim,
            Distribution::Uniform { low: 0.0, high: 1.0 },
        )
        .unwrap();
        let labels: Vec<u8> = (0..batch)
            .map(|_| rng.next_below(config.num_classes) as u8)
            .collect();
        let epsilon = [0.05, 0.1, 0.25, 0.3][rng.next_below(4)];

        let clipped = fgsm(
            &config,
            &params,
            &x,
            &labels,
            &AttackConfig { epsilon, clip_to_unit_box: true },
        )
        .unwrap();
        let free = fgsm(
            &config,
            &params,
            &x,
            &labels,
            &AttackConfig { epsilon, clip_to_unit_box: false },
        )
        .unwrap();
        assert!(
            clipped.max_abs_diff(&x) <= epsilon && free.max_abs_diff(&x) <= epsilon,
            "max-norm bound violated at model {model_idx}"
        );
        assert!(
            clipped.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "clipped output left the unit box at model {model_idx}"
        );
        let identity = fgsm(
            &config,
            &params,
            &x,
            &labels,
            &AttackConfig { epsilon: 0.0, clip_to_unit_box: true },
        )
        .unwrap();
        assert_eq!(identity, x, "zero budget must be the identity");
        checked_inputs += batch;
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion 3 (perturbation invariants)",
        checked_inputs == 10_000 && elapsed < 60.0,
        &format!("{checked_inputs} inputs across 20 models, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: parameter-partition discipline across 100 steps, and the
// beta = 0 run is bitwise identical to a trainer with no discriminator
// code at all.
// ---------------------------------------------------------------------------

fn snapshot(layers: &[advtrain::network::Layer]) -> Vec<Vec<f64>> {
    layers
        .iter()
        .flat_map(|l| [l.weight.data().to_vec(), l.bias.data().to_vec()])
        .collect()
}

#[test]
fn criterion_4_update_partition_discipline() {
    let model = ModelConfig {
        input_dim: 16,
        hidden_widths: vec![10, 8],
        num_classes: 2,
        split_index: 1,
        disc_hidden: 6,
        ..ModelConfig::default()
    };
    let data = make_synthetic(&SyntheticSpec {
        per_class: 120,
        dimension: 16,
        seed: 4,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut config = TrainConfig::for_mode(TrainMode::A3t);
    config.batch_size = 24;
    config.train_epsilon = 0.1;

    let mut params = init_params(&model, &mut RngState::substream(config.seed, "init")).unwrap();
    let mut opt = OptimizerState::new(&params, config.optimizer).unwrap();
    let mut dropout_rng = RngState::substream(config.seed, "dropout");
    let mut shuffle_rng = RngState::substream(config.seed, "shuffle");
    let mut steps = 0u64;
    'outer: loop {
        for (x, y) in batches(&data, config.batch_size, &mut shuffle_rng) {
            steps += 1;
            let mut batch = prepare_batch(&model, &config, &params, &x, &y).unwrap();

            let enc_before = snapshot(&params.encoder);
            let res_before = snapshot(&params.residual);
            let disc_before = snapshot(&params.discriminator);
            discriminator_substep(&model, &config, &mut params, &mut opt, &batch, &mut dropout_rng, steps)
                .unwrap();
            assert_eq!(snapshot(&params.encoder), enc_before, "encoder moved in disc sub-step");
            assert_eq!(snapshot(&params.residual), res_before, "residual moved in disc sub-step");
            assert_ne!(snapshot(&params.discriminator), disc_before, "disc did not move in its sub-step");

            let disc_mid = snapshot(&params.discriminator);
            classifier_substep(&model, &config, &mut params, &mut opt, &mut batch, &mut dropout_rng, steps)
                .unwrap();
            assert_eq!(snapshot(&params.discriminator), disc_mid, "disc moved in classifier sub-step");
            assert_ne!(snapshot(&params.encoder), enc_before, "encoder did not move in classifier sub-step");
            assert_ne!(snapshot(&params.residual), res_before, "residual did not move in classifier sub-step");

            if steps >= 100 {
                break 'outer;
            }
        }
    }

    // beta = 0: the full trainer against an oracle with the discriminator
    // code excised, same seed and same stream layout.
    let model = ModelConfig {
        input_dim: 16,
        hidden_widths: vec![10, 8],
        num_classes: 2,
        split_index: 1,
        disc_hidden: 6,
        ..ModelConfig::default()
    };
    let mut config = TrainConfig::for_mode(TrainMode::At);
    config.epochs = 3;
    config.batch_size = 24;
    config.train_epsilon = 0.1;
    config.validation_count = Some(40);
    let (full, _) = train(&config, &model, &data).unwrap();
    let oracle = disc_free_oracle(&config, &model, &data);
    let same_encoder = full.encoder == oracle.encoder;
    let same_residual = full.residual == oracle.residual;
    check(
        "criterion 4 (update partition discipline)",
        steps >= 100 && same_encoder && same_residual,
        &format!(
            "{steps} sub-step snapshots clean; beta=0 encoder/residual bitwise equal to the discriminator-free oracle: {}/{}",
            same_encoder, same_residual
        ),
    );
}

/// A trainer with no discriminator anywhere: clean/perturbed cross-entropy
/// only. Mirrors the real loop's stream usage so the comparison is bitwise.
fn disc_free_oracle(config: &TrainConfig, model: &ModelConfig, data: &DatasetSplit) -> ModelParams {
    let val_count = config.validation_count.unwrap();
    let (train_split, _) = split_train_validation(data, val_count).unwrap();
    let mut init_rng = RngState::substream(config.seed, "init");
    let mut shuffle_rng = RngState::substream(config.seed, "shuffle");
    let mut params = init_params(model, &mut init_rng).unwrap();
    let mut opt = OptimizerState::new(&params, config.optimizer).unwrap();
    let attack = AttackConfig {
        epsilon: config.train_epsilon,
        clip_to_unit_box: config.clip_adversarial,
    };
    for _ in 0..config.epochs {
        for (x, y) in batches(&train_split, config.batch_size, &mut shuffle_rng) {
            let x_adv = fgsm(model, &params, &x, &y, &attack).unwrap();
            let trace_real = forward_classifier(model, &params, &x).unwrap();
            let trace_adv = forward_classifier(model, &params, &x_adv).unwrap();
            let cls = classification_loss(
                trace_real.logits(),
                Some(trace_adv.logits()),
                &y,
                config.alpha,
            )
            .unwrap();
            let upstream_real = UpstreamGradients {
                logits: Some(&cls.grad_real),
                disc_logits: None,
            };
            let real =
                advtrain::backward(model, &params, &trace_real, upstream_real, GradTargets::classifier())
                    .unwrap();
            let grad_adv = cls.grad_adv.as_ref().unwrap();
            let upstream_adv = UpstreamGradients {
                logits: Some(grad_adv),
                disc_logits: None,
            };
            let adv =
                advtrain::backward(model, &params, &trace_adv, upstream_adv, GradTargets::classifier())
                    .unwrap();
            let total = real.accumulate(&adv).unwrap();
            opt.update_classifier(
                &mut params,
                total.encoder.as_deref().unwrap(),
                total.residual.as_deref().unwrap(),
            )
            .unwrap();
        }
    }
    params
}

// ---------------------------------------------------------------------------
// Criterion 5: two identical-seed full runs produce byte-identical metrics
// and checkpoint files.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_full_run_determinism() {
    let Some(ctx) = mnist_context() else {
        skip("criterion 5 (full-run determinism)");
        return;
    };
    let first = ctx
        .runs
        .iter()
        .find(|r| r.mode == TrainMode::A3t && r.seed == TABLE_SEEDS[0])
        .expect("table includes a3t seed 1");
    let repeat = run_one(&ctx.train_data, &ctx.test_data, TrainMode::A3t, TABLE_SEEDS[0]);
    let metrics_equal = first.metrics_csv == repeat.metrics_csv;
    let checkpoint_equal = first.checkpoint == repeat.checkpoint;
    check(
        "criterion 5 (full-run determinism)",
        metrics_equal && checkpoint_equal,
        &format!(
            "metrics.csv byte-identical: {metrics_equal}; model.ckpt byte-identical: {checkpoint_equal}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: qualitative training dynamics in the fooling regime — the
// validation adversarial accuracy ends above 80% and the discriminator's
// accuracy on perturbed features falls away from its early peak.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_training_dynamics() {
    let Some(ctx) = mnist_context() else {
        skip("criterion 6 (training dynamics)");
        return;
    };
    let run = ctx
        .runs
        .iter()
        .find(|r| r.mode == TrainMode::A2t && r.seed == TABLE_SEEDS[0])
        .expect("table includes a2t seed 1");
    // Parse the emitted CSV rather than an in-memory structure: the file is
    // the artifact the criterion is about.
    let mut adv_val = Vec::new();
    let mut disc_adv_val = Vec::new();
    for line in run.metrics_csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        adv_val.push(fields[4].parse::<f64>().unwrap());
        disc_adv_val.push(fields[8].parse::<f64>().unwrap());
    }
    let final_adv = *adv_val.last().unwrap();
    let early_peak = disc_adv_val[..5].iter().copied().fold(0.0, f64::max);
    let final_disc = *disc_adv_val.last().unwrap();
    check(
        "criterion 6 (training dynamics)",
        final_adv > 0.80 && final_disc < early_peak - 0.02,
        &format!(
            "final validation adversarial accuracy {final_adv:.4} (> 0.80); discriminator accuracy on perturbed features fell {:.4} -> {:.4} from its early peak",
            early_peak, final_disc
        ),
    );
}

// ---------------------------------------------------------------------------
// Invariant alongside the criteria: the epoch-mean classification loss
// falls over the first three epochs in every regime. Checked from the
// cached full-dataset runs.
// ---------------------------------------------------------------------------

#[test]
fn invariant_early_loss_decrease() {
    let Some(ctx) = mnist_context() else {
        skip("invariant (early loss decrease)");
        return;
    };
    let mut all_ok = true;
    let mut detail = String::new();
    for mode in [TrainMode::Simple, TrainMode::At, TrainMode::A2t, TrainMode::A3t] {
        let run = ctx
            .runs
            .iter()
            .find(|r| r.mode == mode && r.seed == TABLE_SEEDS[0])
            .unwrap();
        let losses: Vec<f64> = run
            .metrics_csv
            .lines()
            .skip(1)
            .take(3)
            .map(|line| line.split(',').nth(9).unwrap().parse().unwrap())
            .collect();
        let ok = losses[1] < losses[0] && losses[2] < losses[1];
        all_ok &= ok;
        detail.push_str(&format!(
            "{}: {:.4} > {:.4} > {:.4}; ",
            mode.as_str(),
            losses[0],
            losses[1],
            losses[2]
        ));
    }
    check("invariant (early loss decrease)", all_ok, detail.trim_end());
}

// ---------------------------------------------------------------------------
// Criterion 7: the synthetic two-blob fixture trains to 99% within five
// epochs and ten seconds.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_synthetic_smoke() {
    let start = Instant::now();
    let model = ModelConfig {
        input_dim: 784,
        hidden_widths: vec![32, 16],
        num_classes: 2,
        split_index: 1,
        disc_hidden: 8,
        ..ModelConfig::default()
    };
    let data = make_synthetic(&SyntheticSpec::default()).unwrap();
    let mut config = TrainConfig::for_mode(TrainMode::Simple);
    config.epochs = 5;
    config.batch_size = 10;
    config.optimizer.learning_rate = 1e-2;
    config.validation_fraction = 1.0 / 6.0;
    let (_, history) = train(&config, &model, &data).unwrap();
    let best_train_acc = history
        .epochs
        .iter()
        .map(|r| r.cls_acc_real_train)
        .fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    check(
        "criterion 7 (synthetic smoke)",
        best_train_acc >= 0.99 && elapsed < 10.0,
        &format!("train accuracy {best_train_acc:.4} within {} epochs, {elapsed:.2}s", config.epochs),
    );
}
