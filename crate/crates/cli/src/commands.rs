use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use glyphnet::checkpoint::{load_checkpoint, read_manifest_text, save_checkpoint, Checkpoint, Provenance};
use glyphnet::data::{load_corpus, split, write_atomic, BatchIter, DatasetSplit};
use glyphnet::metrics::{evaluate, MetricsAccumulator};
use glyphnet::models::average_probabilities;
use glyphnet::toy::generate_toy_corpus;
use glyphnet::train::fit;
use glyphnet::{ArchSpec, EpochRecord, Evaluation, InputSpec, ModelGraph, ModelKind};
use serde::Serialize;

use crate::config::{EvalConfig, RunConfig, EVAL_BATCH};

pub const METRICS_FILE: &str = "metrics.json";
pub const PER_CLASS_FILE: &str = "per_class.csv";

#[derive(Serialize)]
struct DataSummary<'a> {
    corpus: &'a Path,
    image_size: usize,
    class_names: &'a [String],
    train: usize,
    test: usize,
    skipped: usize,
    train_frac: f64,
    split_seed: u64,
}

impl<'a> DataSummary<'a> {
    fn new(corpus: &'a Path, image_size: usize, train_frac: f64, split: &'a DatasetSplit, skipped: usize) -> Self {
        Self {
            corpus,
            image_size,
            class_names: &split.class_names,
            train: split.train.len(),
            test: split.test.len(),
            skipped,
            train_frac,
            split_seed: split.seed,
        }
    }
}

#[derive(Serialize)]
struct ModelSummary {
    kind: ModelKind,
    classes: usize,
    input: InputSpec,
    params: usize,
    checkpoint: String,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    run_id: String,
    config: &'a RunConfig,
    model: ModelSummary,
    data: DataSummary<'a>,
    curves: &'a [EpochRecord],
    test: &'a Evaluation,
}

#[derive(Serialize)]
struct MemberReport {
    checkpoint: PathBuf,
    kind: ModelKind,
    provenance: Provenance,
    test: Evaluation,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    command: &'static str,
    run_id: String,
    config: &'a EvalConfig,
    data: DataSummary<'a>,
    members: Vec<MemberReport>,
    test: &'a Evaluation,
}

fn write_reports(out: &Path, report: &impl Serialize, eval: &Evaluation) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_atomic(&out.join(METRICS_FILE), json.as_bytes())?;
    write_atomic(&out.join(PER_CLASS_FILE), eval.per_class_csv().as_bytes())?;
    Ok(())
}

fn print_summary(label: &str, e: &Evaluation) {
    println!(
        "{label}: top1 {:.4} top3 {:.4} loss {:.4} macro-F1 {:.4} ({} samples)",
        e.top1, e.top3, e.loss, e.macro_f1, e.samples
    );
}

fn load_split(corpus: &Path, image_size: usize, train_frac: f64, seed: u64) -> Result<(DatasetSplit, usize)> {
    let corpus_data =
        load_corpus(corpus, image_size).with_context(|| format!("loading corpus {}", corpus.display()))?;
    let skipped = corpus_data.skipped;
    if skipped > 0 {
        log::warn!("skipped {skipped} unreadable files in {}", corpus.display());
    }
    Ok((split(corpus_data, train_frac, seed)?, skipped))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let run_id = cfg.run_id()?;
    let (split, skipped) = load_split(&cfg.corpus, cfg.image_size, cfg.train_frac, cfg.train.seed)?;
    log::info!(
        "corpus: {} classes, {} train, {} test images",
        split.classes(),
        split.train.len(),
        split.test.len()
    );
    let input = InputSpec::grayscale(cfg.image_size, cfg.image_size);
    let mut model = ModelGraph::<f32>::build(ArchSpec::new(cfg.model, split.classes(), input), cfg.train.seed)?;
    log::info!(
        "model {}: {} parameters, lr0 {}, augmentation {}",
        cfg.model,
        model.param_count(),
        cfg.train.lr0,
        if cfg.train.augment.enabled { "on" } else { "off" }
    );

    let started = Instant::now();
    let curves = fit(&mut model, &split, &cfg.train, |r| {
        log::info!(
            "epoch {:>3} lr {:.3e} train loss {:.4} top1 {:.4} | val loss {:.4} top1 {:.4} top3 {:.4} [{:.0}s]",
            r.epoch + 1,
            r.lr,
            r.train_loss,
            r.train_top1,
            r.val_loss,
            r.val_top1,
            r.val_top3,
            started.elapsed().as_secs_f64()
        );
    })?;
    let test = evaluate(&model, &split.test, &split.class_names, EVAL_BATCH)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ckpt_name = format!("{}.ckpt", cfg.model.file_stem());
    let provenance = Provenance {
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        augment: cfg.train.augment.enabled,
    };
    save_checkpoint(&model, &provenance, &cfg.out.join(&ckpt_name))?;
    let report = TrainReport {
        command: "train",
        run_id,
        config: cfg,
        model: ModelSummary {
            kind: cfg.model,
            classes: model.classes(),
            input,
            params: model.param_count(),
            checkpoint: ckpt_name,
        },
        data: DataSummary::new(&cfg.corpus, cfg.image_size, cfg.train_frac, &split, skipped),
        curves: &curves,
        test: &test,
    };
    write_reports(&cfg.out, &report, &test)?;
    print_summary(&format!("model {} test", cfg.model), &test);
    Ok(())
}

/// Fails unless every checkpoint agrees on class count and input shape,
/// naming each file and what it holds.
fn check_compatible(paths: &[PathBuf], loaded: &[Checkpoint]) -> Result<()> {
    let listing = |f: &dyn Fn(&Checkpoint) -> String| {
        paths
            .iter()
            .zip(loaded)
            .map(|(p, c)| format!("{}: {}", p.display(), f(c)))
            .collect::<Vec<_>>()
            .join("; ")
    };
    let first = &loaded[0].model;
    if loaded.iter().any(|c| c.model.classes() != first.classes()) {
        bail!(
            "checkpoints disagree on the number of classes ({})",
            listing(&|c| format!("{} classes", c.model.classes()))
        );
    }
    if loaded.iter().any(|c| c.model.spec().input != first.spec().input) {
        bail!(
            "checkpoints disagree on the input shape ({})",
            listing(&|c| {
                let i = c.model.spec().input;
                format!("{}x{}x{}", i.channels, i.height, i.width)
            })
        );
    }
    Ok(())
}

pub fn evaluate_checkpoints(cfg: &EvalConfig) -> Result<()> {
    let run_id = cfg.run_id()?;
    let loaded = cfg
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    check_compatible(&cfg.checkpoints, &loaded)?;
    let first = &loaded[0];
    let input = first.model.spec().input;
    ensure!(
        input.height == input.width,
        "non-square input {}x{} is not supported",
        input.height,
        input.width
    );
    if let Some(size) = cfg.image_size {
        ensure!(
            size == input.height,
            "--image-size {size} differs from the checkpoints' input size {}",
            input.height
        );
    }
    let seed = cfg.seed.unwrap_or(first.provenance.seed);
    if cfg.seed.is_none() && loaded.iter().any(|c| c.provenance.seed != seed) {
        log::warn!("members were trained with different seeds; splitting with seed {seed}");
    }

    let (split, skipped) = load_split(&cfg.corpus, input.height, cfg.train_frac, seed)?;
    let k = first.model.classes();
    ensure!(
        split.classes() == k,
        "corpus {} has {} classes, the checkpoints {k}",
        cfg.corpus.display(),
        split.classes()
    );

    let mut member_acc = (0..loaded.len())
        .map(|_| MetricsAccumulator::new(k))
        .collect::<glyphnet::Result<Vec<_>>>()?;
    let mut ensemble_acc = MetricsAccumulator::new(k)?;
    for batch in BatchIter::sequential(&split.test, EVAL_BATCH)? {
        let outputs = loaded
            .iter()
            .map(|c| c.model.predict_proba(&batch.images))
            .collect::<glyphnet::Result<Vec<_>>>()?;
        for (acc, probs) in member_acc.iter_mut().zip(&outputs) {
            acc.add(probs, &batch.labels)?;
        }
        let combined = if outputs.len() == 1 {
            outputs.into_iter().next().expect("one output")
        } else {
            average_probabilities(&outputs)?
        };
        ensemble_acc.add(&combined, &batch.labels)?;
    }
    let members = cfg
        .checkpoints
        .iter()
        .zip(&loaded)
        .zip(&member_acc)
        .map(|((path, c), acc)| {
            Ok(MemberReport {
                checkpoint: path.clone(),
                kind: c.model.kind(),
                provenance: c.provenance.clone(),
                test: acc.finish(&split.class_names)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = ensemble_acc.finish(&split.class_names)?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let report = EvalReport {
        command: "evaluate",
        run_id,
        config: cfg,
        data: DataSummary::new(&cfg.corpus, input.height, cfg.train_frac, &split, skipped),
        members,
        test: &test,
    };
    write_reports(&cfg.out, &report, &test)?;
    if report.members.len() > 1 {
        for m in &report.members {
            print_summary(&m.checkpoint.display().to_string(), &m.test);
        }
        print_summary("ensemble", &test);
    } else {
        print_summary(&cfg.checkpoints[0].display().to_string(), &test);
    }
    Ok(())
}

pub fn gen_toy(out: &Path, classes: usize, per_class: usize, seed: u64) -> Result<()> {
    ensure!(classes >= 2, "--classes must be at least 2, got {classes}");
    ensure!(per_class >= 1, "--per-class must be at least 1");
    let files = generate_toy_corpus(out, classes, per_class, seed)?;
    println!("wrote {} images in {classes} classes to {}", files.len(), out.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    print!("{}", read_manifest_text(path)?);
    Ok(())
}
