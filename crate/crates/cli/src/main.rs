// `!(x > y)` is used on purpose: it is also true for NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cbamnet::data::{
    expand_with_augmentations, scan_dataset, stratified_split, synth_dataset, write_split_audit,
    BatchSource, DatasetIndex, ImageLoader, Item, ItemSource, SplitAssignment, SplitFractions,
    Subset, SynthConfig, MIN_CLASS_SIZE,
};
use cbamnet::gradcam::{compute_gradcam, overlay, write_explanation, DEFAULT_ALPHA, DEFAULT_LAYER};
use cbamnet::metrics::{argmax, MetricsReport};
use cbamnet::nn::softmax;
use cbamnet::trainer::{evaluate_split, fit, CheckpointPolicy, TrainConfig};
use cbamnet::{
    build_model, load_checkpoint, no_grad, save_checkpoint, CheckpointMeta, Error, Model, ModelSpec,
};

/// Train, evaluate, explain and inspect the CBAM leaf-disease classifier.
#[derive(Parser, Debug)]
#[command(name = "cbamnet", version)]
struct Cli {
    /// Seed for initialization, splitting, shuffling, dropout and augmentation.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Worker threads for image decoding [default: all cores].
    #[arg(long, global = true, env = "CBAMNET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a directory-per-class dataset.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Write Grad-CAM heatmap and overlay images for one image.
    Explain(ExplainArgs),
    /// Print the per-layer parameter table.
    Inspect(InspectArgs),
    /// Generate a synthetic planted-pattern dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; history.csv and split_audit.tsv are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 8)]
    reduction_ratio: usize,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
    /// Add flipped, brightened, contrast-shifted and rotated copies of every training image.
    #[arg(long)]
    augment_train: bool,
    /// Augment the whole dataset before splitting, so variants of one image may land in different splits.
    #[arg(long)]
    augment_before_split: bool,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 224)]
    image_size: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::BestValAcc)]
    checkpoint_policy: PolicyArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    BestValAcc,
    Last,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Subset {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Subset::Train,
            SplitArg::Val => Subset::Val,
            SplitArg::Test => Subset::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Metrics JSON output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Class to explain [default: the predicted class].
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value = DEFAULT_LAYER)]
    layer: String,
    /// Heatmap weight in the overlay.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Inspect the default architecture instead of a checkpoint.
    #[arg(long)]
    default_spec: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Standard deviation of the pixel noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

/// Exit 2 for rejected arguments, 1 for everything else.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Explain(a) => explain(a),
        Command::Inspect(a) => inspect(a),
        Command::Synth(a) => synth(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Train, validation and test item lists for a dataset.
fn split_items(
    index: &DatasetIndex,
    fractions: SplitFractions,
    seed: u64,
    augment_before_split: bool,
    augment_train: bool,
) -> cbamnet::Result<(SplitAssignment, [Vec<Item>; 3])> {
    let labels = index.labels();
    let k = index.class_names.len();
    if augment_before_split {
        let all: Vec<usize> = (0..index.len()).collect();
        let items = expand_with_augmentations(&all, &labels);
        let item_labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let split = stratified_split(&item_labels, k, fractions, seed)?;
        let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
        let subsets = [pick(&split.train), pick(&split.val), pick(&split.test)];
        return Ok((split, subsets));
    }
    let split = stratified_split(&labels, k, fractions, seed)?;
    let originals = |ids: &[usize]| {
        ids.iter()
            .map(|&s| Item {
                source: s,
                label: labels[s],
                augment: None,
            })
            .collect::<Vec<_>>()
    };
    let train = if augment_train {
        expand_with_augmentations(&split.train, &labels)
    } else {
        originals(&split.train)
    };
    let subsets = [train, originals(&split.val), originals(&split.test)];
    Ok((split, subsets))
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    log::info!(
        "epochs={} batch_size={} lr={} dropout={} reduction_ratio={} seed={} split={} image_size={}",
        a.epochs,
        a.batch_size,
        a.lr,
        a.dropout,
        a.reduction_ratio,
        cli.seed,
        a.split,
        a.image_size
    );
    let fractions: SplitFractions = a.split.parse().map_err(|e: Error| usage(e.to_string()))?;
    if a.epochs == 0 || a.batch_size == 0 || !(a.lr > 0.0) {
        return Err(usage("--epochs, --batch-size and --lr must be positive"));
    }
    let index = scan_dataset(&a.data)?;
    let spec = ModelSpec {
        input_size: a.image_size,
        num_classes: index.class_names.len(),
        dropout_rate: a.dropout,
        reduction_ratio: a.reduction_ratio,
        ..ModelSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (split, [train_items, val_items, test_items]) = split_items(
        &index,
        fractions,
        cli.seed,
        a.augment_before_split,
        a.augment_train,
    )?;
    log::info!(
        "{} images in {} classes; {} train, {} val, {} test",
        index.len(),
        index.class_names.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let out_dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let audit_path = out_dir.join("split_audit.tsv");
    if a.augment_before_split {
        write_item_audit(&audit_path, &index, [&train_items, &val_items, &test_items])?;
    } else {
        let paths: Vec<PathBuf> = index.samples.iter().map(|s| s.path.clone()).collect();
        write_split_audit(&audit_path, &paths, &split)?;
    }

    let loader = ImageLoader::new(a.image_size, cli.threads)?;
    let source = |items: Vec<Item>| ItemSource {
        index: &index,
        items,
        loader: &loader,
        seed: cli.seed,
    };
    let (train_src, val_src) = (source(train_items), source(val_items));
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: cli.seed,
        checkpoint_policy: match a.checkpoint_policy {
            PolicyArg::BestValAcc => CheckpointPolicy::BestValAcc,
            PolicyArg::Last => CheckpointPolicy::Last,
        },
    };
    let mut model = build_model(&spec, cli.seed)?;
    let outcome = fit(&mut model, &train_src, &val_src, &cfg)?;
    let history_path = out_dir.join("history.csv");
    fs::write(&history_path, outcome.history.to_csv())
        .with_context(|| format!("writing {}", history_path.display()))?;
    let meta = CheckpointMeta {
        class_names: index.class_names.clone(),
        split_seed: cli.seed,
        split_fractions: fractions.as_array(),
        augment_before_split: a.augment_before_split,
    };
    save_checkpoint(&outcome.best, &meta, &a.out)?;
    let last = outcome.history.records.last().expect("epochs > 0");
    println!(
        "final train_acc={:.4} val_acc={:.4}; saved epoch {} to {}",
        last.train_acc,
        last.val_acc,
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// `path<TAB>variant<TAB>split` for every item of an augment-then-split run.
fn write_item_audit(
    path: &Path,
    index: &DatasetIndex,
    subsets: [&[Item]; 3],
) -> cbamnet::Result<()> {
    let mut text = String::new();
    for (items, name) in subsets.into_iter().zip(["train", "val", "test"]) {
        for it in items.iter() {
            let variant = it.augment.map_or("original", |k| k.as_str());
            text.push_str(&format!(
                "{}\t{variant}\t{name}\n",
                index.samples[it.source].path.display()
            ));
        }
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CmdResult {
    let (model, meta) = load_checkpoint(&a.model)?;
    let index = scan_dataset(&a.data)?;
    if index.class_names != meta.class_names {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "dataset classes {:?} do not match the checkpoint's {:?}",
            index.class_names,
            meta.class_names
        )));
    }
    let [train, val, test] = meta.split_fractions;
    let fractions = SplitFractions::new(train, val, test)?;
    let (_, [train_items, val_items, test_items]) = split_items(
        &index,
        fractions,
        meta.split_seed,
        meta.augment_before_split,
        false,
    )?;
    let items = match a.split {
        SplitArg::Train => train_items,
        SplitArg::Val => val_items,
        SplitArg::Test => test_items,
    };
    let subset: Subset = a.split.into();
    if items.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "the {} split is empty",
            subset.as_str()
        )));
    }
    let loader = ImageLoader::new(model.spec.input_size, cli.threads)?;
    let src = ItemSource {
        index: &index,
        items,
        loader: &loader,
        seed: meta.split_seed,
    };
    let eval = evaluate_split(&model, &src, a.batch_size.max(1))?;
    let report = MetricsReport::build(&eval.probabilities, &eval.labels, &meta.class_names)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("split={} samples={}", subset.as_str(), src.len());
    println!("accuracy={:.4}", report.accuracy);
    println!(
        "macro_precision={:.4} macro_recall={:.4} macro_f1={:.4}",
        report.macro_avg.precision, report.macro_avg.recall, report.macro_avg.f1
    );
    Ok(())
}

fn explain(a: &ExplainArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!(
            "--alpha must lie in [0, 1], got {}",
            a.alpha
        )));
    }
    let (model, meta) = load_checkpoint(&a.model)?;
    let k = model.spec.num_classes;
    if let Some(c) = a.class {
        if c >= k {
            return Err(usage(format!(
                "--class {c} out of range; the model has {k} classes (0..{})",
                k - 1
            )));
        }
    }
    match model.block_index(&a.layer) {
        Err(e @ Error::UnknownLayer { .. }) => return Err(usage(e.to_string())),
        other => {
            other?;
        }
    }
    let img = cbamnet::data::load_image(&a.image, model.spec.input_size)?;
    let x = img.to_tensor();
    let probs = no_grad(|| model.infer(&x).and_then(|l| softmax(&l)))?;
    let probs: Vec<f64> = probs.data().iter().map(|&p| p as f64).collect();
    let predicted = argmax(&probs);
    let target = a.class.unwrap_or(predicted);
    let heat = compute_gradcam(&model, &x, target, &a.layer)?;
    let blended = overlay(&heat, &img.to_rgb8(), a.alpha)?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let (heat_path, overlay_path) = write_explanation(&a.out_dir, &stem, &heat, &blended)?;
    let name = |c: usize| {
        meta.class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| c.to_string())
    };
    println!(
        "predicted class {predicted} ({}) probability {:.4}",
        name(predicted),
        probs[predicted]
    );
    let (hx, hy) = heat.argmax();
    println!(
        "explained class {target} ({}) at {}; peak at x={hx} y={hy}{}",
        name(target),
        a.layer,
        if heat.all_zero {
            "; map is all zero"
        } else {
            ""
        }
    );
    println!(
        "wrote {} and {}",
        heat_path.display(),
        overlay_path.display()
    );
    Ok(())
}

fn inspect(a: &InspectArgs) -> CmdResult {
    let model: Model = match &a.model {
        Some(path) => load_checkpoint(path)?.0,
        None => build_model(&ModelSpec::default(), 0)?,
    };
    let report = model.count_parameters();
    println!(
        "{:<18} {:<40} {:>12} {:>8}",
        "layer", "kind", "trainable", "buffers"
    );
    for l in &report.layers {
        println!(
            "{:<18} {:<40} {:>12} {:>8}",
            l.name,
            l.kind.to_string(),
            l.trainable,
            l.buffers
        );
    }
    println!("trainable parameters: {}", report.trainable);
    println!("buffer values: {}", report.buffers);
    println!("total parameters: {}", report.total);
    println!(
        "size: {:.3} MiB ({} bytes as f32)",
        report.mebibytes(),
        report.bytes
    );
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> CmdResult {
    if a.per_class < MIN_CLASS_SIZE {
        return Err(usage(format!(
            "--per-class {} is too small; a stratified split needs at least {MIN_CLASS_SIZE} images per class",
            a.per_class
        )));
    }
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    if a.size < 16 || !a.size.is_multiple_of(16) {
        return Err(usage(format!(
            "--size must be a positive multiple of 16, got {}",
            a.size
        )));
    }
    if !(a.noise >= 0.0) {
        return Err(usage(format!(
            "--noise must be non-negative, got {}",
            a.noise
        )));
    }
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        size: a.size,
        noise: a.noise,
        seed: cli.seed,
    };
    let index = synth_dataset(&a.out, &cfg)?;
    println!(
        "wrote {} images in {} classes to {}",
        index.len(),
        index.class_names.len(),
        a.out.display()
    );
    Ok(())
}
