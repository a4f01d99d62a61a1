//! Command-line surface: train models, evaluate checkpoints, export
//! adversarial examples, and verify gradients.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage
//! errors (bad flags, unknown config keys).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use advtrain::{
    evaluate, load_checkpoint, load_mnist_dir, run_gradcheck, save_checkpoint,
    train_with_observer, AttackConfig, GradCheckConfig, ModelConfig, TrainConfig, TrainMode,
};

#[derive(Parser)]
#[command(name = "advtrain", version, about = "Train and probe image classifiers hardened against gradient-sign attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint, and a run report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split at a given budget.
    Eval(EvalArgs),
    /// Export adversarial examples with their originals and predictions.
    Attack(AttackArgs),
    /// Verify every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training regime: simple | at | a2t | a3t.
    #[arg(long)]
    mode: Option<String>,
    /// Directory holding the four uncompressed MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Output directory for metrics.csv, model.ckpt, report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Clean/perturbed mixing weight; defaults follow the mode.
    #[arg(long)]
    alpha: Option<f64>,
    /// Encoder fooling weight; defaults follow the mode.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    train_epsilon: Option<f64>,
    /// Budget for the final test evaluation.
    #[arg(long)]
    eval_epsilon: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    disc_updates: Option<usize>,
    /// Leave perturbed pixels unclamped instead of clipping to [0,1].
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    validation_count: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mnist_dir: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    eval_epsilon: f64,
    /// Evaluate a comma-separated list of budgets and emit one CSV row per
    /// value.
    #[arg(long, num_args = 0..=1, default_missing_value = "0,0.05,0.1,0.25")]
    sweep: Option<String>,
    /// Where to write eval.json (and sweep.csv when sweeping).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mnist_dir: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// How many test examples to export.
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Corrupt one analytic gradient on purpose; the run must then fail.
    #[arg(long, hide = true)]
    negative_control: bool,
}

/// Everything a run needs, echoed verbatim into the report so the run can
/// be reproduced from the report alone.
#[derive(Clone, Debug, Serialize)]
struct ResolvedTrainConfig {
    mnist_dir: PathBuf,
    out_dir: PathBuf,
    eval_epsilon: f64,
    #[serde(flatten)]
    train: TrainConfig,
    model: ModelConfig,
}

#[derive(Serialize)]
struct RunReport {
    mode: &'static str,
    seed: u64,
    config: ResolvedTrainConfig,
    final_test_real_accuracy: f64,
    final_test_adv_accuracy: f64,
    metrics_path: PathBuf,
    checkpoint_path: PathBuf,
    wall_clock_seconds: f64,
}

/// Parse a flat key=value file: one pair per line, blank lines and
/// #-comments ignored.
fn parse_config_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

struct UsageError(String);

/// Fold the config file into the argument set; explicit flags win.
fn apply_config_file(args: &mut TrainArgs, entries: Vec<(String, String)>) -> Result<(), UsageError> {
    fn fill<T: std::str::FromStr>(
        slot: &mut Option<T>,
        key: &str,
        value: &str,
    ) -> Result<(), UsageError> {
        if slot.is_none() {
            *slot = Some(value.parse().map_err(|_| {
                UsageError(format!("config key '{key}' has unparsable value '{value}'"))
            })?);
        }
        Ok(())
    }
    for (key, value) in entries {
        match key.as_str() {
            "mode" => fill(&mut args.mode, &key, &value)?,
            "mnist-dir" => fill(&mut args.mnist_dir, &key, &value)?,
            "out" => fill(&mut args.out, &key, &value)?,
            "seed" => fill(&mut args.seed, &key, &value)?,
            "epochs" => fill(&mut args.epochs, &key, &value)?,
            "batch-size" => fill(&mut args.batch_size, &key, &value)?,
            "alpha" => fill(&mut args.alpha, &key, &value)?,
            "beta" => fill(&mut args.beta, &key, &value)?,
            "train-epsilon" => fill(&mut args.train_epsilon, &key, &value)?,
            "eval-epsilon" => fill(&mut args.eval_epsilon, &key, &value)?,
            "lr" => fill(&mut args.lr, &key, &value)?,
            "disc-updates" => fill(&mut args.disc_updates, &key, &value)?,
            "validation-count" => fill(&mut args.validation_count, &key, &value)?,
            "no-clip" => {
                let flag: bool = value.parse().map_err(|_| {
                    UsageError(format!("config key 'no-clip' has unparsable value '{value}'"))
                })?;
                args.no_clip = args.no_clip || flag;
            }
            other => return Err(UsageError(format!("unknown config key '{other}'"))),
        }
    }
    Ok(())
}

fn resolve_train_config(mut args: TrainArgs) -> Result<ResolvedTrainConfig, UsageError> {
    if let Some(path) = args.config.take() {
        let entries = parse_config_file(&path).map_err(|e| UsageError(format!("{e:#}")))?;
        apply_config_file(&mut args, entries)?;
    }
    let mode: TrainMode = args
        .mode
        .as_deref()
        .ok_or_else(|| UsageError("--mode is required".to_string()))?
        .parse()
        .map_err(|e| UsageError(format!("{e}")))?;
    let mnist_dir = args
        .mnist_dir
        .ok_or_else(|| UsageError("--mnist-dir is required".to_string()))?;
    let out_dir = args
        .out
        .ok_or_else(|| UsageError("--out is required".to_string()))?;
    let mut train = TrainConfig::for_mode(mode);
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.alpha {
        train.alpha = v;
    }
    if let Some(v) = args.beta {
        train.beta = v;
    }
    if let Some(v) = args.train_epsilon {
        train.train_epsilon = v;
    }
    if let Some(v) = args.lr {
        train.optimizer.learning_rate = v;
    }
    if let Some(v) = args.disc_updates {
        train.disc_updates = v;
    }
    if let Some(v) = args.validation_count {
        train.validation_count = Some(v);
    }
    train.clip_adversarial = !args.no_clip;
    Ok(ResolvedTrainConfig {
        mnist_dir,
        out_dir,
        eval_epsilon: args.eval_epsilon.unwrap_or(0.1),
        train,
        model: ModelConfig::default(),
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let resolved = match resolve_train_config(args) {
        Ok(r) => r,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    };
    let start = Instant::now();
    let (train_data, test_data) = load_mnist_dir(&resolved.mnist_dir)?;
    std::fs::create_dir_all(&resolved.out_dir)
        .with_context(|| format!("creating {}", resolved.out_dir.display()))?;

    println!(
        "training mode={} alpha={} beta={} train_epsilon={} epochs={} seed={}",
        resolved.train.mode.as_str(),
        resolved.train.alpha,
        resolved.train.beta,
        resolved.train.train_epsilon,
        resolved.train.epochs,
        resolved.train.seed,
    );
    let (params, history) =
        train_with_observer(&resolved.train, &resolved.model, &train_data, |row| {
            println!(
                "epoch {:>3}: cls real/adv val {:.4}/{:.4}  disc real/adv val {:.4}/{:.4}  loss {:.4}",
                row.epoch,
                row.cls_acc_real_val,
                row.cls_acc_adv_val,
                row.disc_acc_real_val,
                row.disc_acc_adv_val,
                row.loss_cls,
            );
        })?;

    let metrics_path = resolved.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, history.to_csv())
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    let checkpoint_path = resolved.out_dir.join("model.ckpt");
    save_checkpoint(&params, &resolved.model, &checkpoint_path)?;

    let test_metrics = evaluate(
        &resolved.model,
        &params,
        &test_data,
        resolved.eval_epsilon,
        resolved.train.clip_adversarial,
    )?;
    println!(
        "test at epsilon {}: real {:.4} adversarial {:.4}",
        resolved.eval_epsilon, test_metrics.real_acc, test_metrics.adv_acc
    );

    let report = RunReport {
        mode: resolved.train.mode.as_str(),
        seed: resolved.train.seed,
        final_test_real_accuracy: test_metrics.real_acc,
        final_test_adv_accuracy: test_metrics.adv_acc,
        metrics_path: metrics_path.clone(),
        checkpoint_path: checkpoint_path.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: resolved,
    };
    let report_path = report.config.out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!("wrote {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    epsilon: f64,
    real_accuracy: f64,
    adv_accuracy: f64,
    disc_real_accuracy: f64,
    disc_adv_accuracy: f64,
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (params, model) = load_checkpoint(&args.checkpoint)?;
    let (_, test_data) = load_mnist_dir(&args.mnist_dir)?;
    let clip = !args.no_clip;

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }

    if let Some(sweep) = &args.sweep {
        let mut csv = String::from("epsilon,real_accuracy,adv_accuracy\n");
        for token in sweep.split(',') {
            let epsilon: f64 = token
                .trim()
                .parse()
                .map_err(|_| anyhow!("bad sweep value '{token}'"))?;
            let m = evaluate(&model, &params, &test_data, epsilon, clip)?;
            println!(
                "epsilon {epsilon}: real {:.4} adversarial {:.4}",
                m.real_acc, m.adv_acc
            );
            csv.push_str(&format!("{epsilon},{},{}\n", m.real_acc, m.adv_acc));
        }
        if let Some(out) = &args.out {
            let path = out.join("sweep.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        return Ok(());
    }

    let m = evaluate(&model, &params, &test_data, args.eval_epsilon, clip)?;
    println!(
        "epsilon {}: real {:.4} adversarial {:.4} (discriminator real {:.4} adv {:.4})",
        args.eval_epsilon, m.real_acc, m.adv_acc, m.disc_real_acc, m.disc_adv_acc
    );
    if let Some(out) = &args.out {
        let report = EvalReport {
            epsilon: args.eval_epsilon,
            real_accuracy: m.real_acc,
            adv_accuracy: m.adv_acc,
            disc_real_accuracy: m.disc_real_acc,
            disc_adv_accuracy: m.disc_adv_acc,
        };
        let path = out.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> anyhow::Result<()> {
    use advtrain::dataset::{idx_images_bytes, idx_labels_bytes, IdxImages};
    use advtrain::{fgsm, forward_classifier};

    let (params, model) = load_checkpoint(&args.checkpoint)?;
    let (_, test_data) = load_mnist_dir(&args.mnist_dir)?;
    if args.count == 0 || args.count > test_data.len() {
        bail!(
            "count {} outside 1..={} available test examples",
            args.count,
            test_data.len()
        );
    }
    let attack = AttackConfig {
        epsilon: args.epsilon,
        clip_to_unit_box: !args.no_clip,
    };
    attack.validate()?;

    let idx: Vec<usize> = (0..args.count).collect();
    let x = test_data.images.select_rows(&idx);
    let labels = &test_data.labels[..args.count];
    let x_adv = fgsm(&model, &params, &x, labels, &attack)?;
    let clean_logits = forward_classifier(&model, &params, &x)?;
    let adv_logits = forward_classifier(&model, &params, &x_adv)?;

    // All computation stays in reals; quantization happens only at export.
    let quantize = |t: &advtrain::Tensor| -> Vec<u8> {
        t.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
    };
    let side = (model.input_dim as f64).sqrt() as usize;
    let (rows, cols) = if side * side == model.input_dim {
        (side, side)
    } else {
        (1, model.input_dim)
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let write = |name: &str, bytes: Vec<u8>| -> anyhow::Result<PathBuf> {
        let path = args.out.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };
    write(
        "originals-images-idx3-ubyte",
        idx_images_bytes(&IdxImages {
            count: args.count,
            rows,
            cols,
            pixels: quantize(&x),
        }),
    )?;
    write(
        "adversarial-images-idx3-ubyte",
        idx_images_bytes(&IdxImages {
            count: args.count,
            rows,
            cols,
            pixels: quantize(&x_adv),
        }),
    )?;
    write("labels-idx1-ubyte", idx_labels_bytes(labels))?;

    let mut csv = String::from("index,true_label,clean_prediction,adversarial_prediction\n");
    let mut flipped = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let clean = advtrain::attack::argmax_row(clean_logits.logits().row(i));
        let adv = advtrain::attack::argmax_row(adv_logits.logits().row(i));
        if clean != adv {
            flipped += 1;
        }
        csv.push_str(&format!("{i},{label},{clean},{adv}\n"));
    }
    write("attack.csv", csv.into_bytes())?;
    println!(
        "exported {} examples at epsilon {}; {} predictions flipped",
        args.count, args.epsilon, flipped
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let options = GradCheckConfig {
        seed: args.seed,
        trials: args.trials,
        negative_control: args.negative_control,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let report = run_gradcheck(&options)?;
    println!("trials: {}", report.trials);
    println!("comparisons: {}", report.checks);
    println!(
        "worst relative error: {:.3e} at {}",
        report.worst_rel_error, report.worst_case
    );
    println!("elapsed: {:.2}s", start.elapsed().as_secs_f64());
    if report.passed {
        println!("PASS (tolerance {:.0e})", options.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "FAIL (tolerance {:.0e}): {}",
            options.tolerance, report.worst_case
        );
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(args).map(|()| ExitCode::SUCCESS),
        Command::Attack(args) => cmd_attack(args).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
