use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pcc_core::encoder::ImageTensor;
use pcc_core::geometry::io::{read_xyz, write_xyz};
use pcc_core::geometry::{chamfer_distance, fscore, PointCloud};
use pcc_core::training::{
    self, gen_data as generate, load_checkpoint, load_split, score, train as run_training, EvalReport, HistoryRow,
    Scored, Split, TrainOptions, MANIFEST,
};
use pcc_core::{AblationVariant, CompletionModel, PipelineConfig};

use crate::{load_config, plot, Global};

/// Missing or contradictory command-line arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn out_dir(g: &Global, cfg: &PipelineConfig, fallback: impl Into<PathBuf>) -> PathBuf {
    g.out
        .clone()
        .or_else(|| cfg.paths.output.clone())
        .unwrap_or_else(|| fallback.into())
}

fn snapshot_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()).with_context(|| format!("writing config to {}", dir.display()))
}

pub fn gen_data(g: &Global) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.data.seed = s;
    }
    let out = g
        .out
        .clone()
        .or_else(|| cfg.paths.dataset.clone())
        .unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = generate(&cfg, &out)?;
    cfg.paths.dataset = Some(out.clone());
    snapshot_config(&cfg, &out)?;
    for split in Split::ALL {
        println!("{split}: {} samples", manifest.split(split).count());
    }
    println!("wrote {} samples to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn dataset_root(arg: Option<PathBuf>, cfg: &PipelineConfig) -> Result<PathBuf> {
    let root = arg
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| usage("no dataset given (use --dataset or paths.dataset)"))?;
    if !root.join(MANIFEST).is_file() {
        return Err(usage(format!("{} has no {MANIFEST}", root.display())));
    }
    Ok(root)
}

pub fn train(
    g: &Global,
    dataset: Option<PathBuf>,
    variant: AblationVariant,
    resume: bool,
    max_epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(g)?;
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    let root = dataset_root(dataset, &cfg)?;
    let out = out_dir(g, &cfg, Path::new("runs").join(variant.name()));
    let train_set = load_split(&root, Split::Train, &cfg).context("loading training split")?;
    let val_set = load_split(&root, Split::Val, &cfg).context("loading validation split")?;
    if train_set.is_empty() {
        return Err(usage(format!("{} has no training samples", root.display())));
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.paths.dataset = Some(root);
    cfg.paths.output = Some(out.clone());
    snapshot_config(&cfg, &out)?;

    println!(
        "training {variant} on {} samples ({} val), {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let mut print_row = |r: &HistoryRow| {
        println!(
            "epoch {:>4}  alpha {:.4}  loss {:.6}  train_cd {:.6}  val_cd {:.6}  val_f1 {:.4}",
            r.epoch, r.alpha, r.train_loss, r.train_cd, r.val_cd, r.val_f1
        );
    };
    let mut opts = TrainOptions::new(variant, &out);
    opts.resume = resume;
    opts.stop_after = max_epochs;
    opts.progress = Some(&mut print_row);
    let report = run_training(&cfg, &train_set, &val_set, opts)?;
    println!(
        "{} after {} epochs; checkpoints in {}",
        if report.finished { "finished" } else { "stopped" },
        report.history.len(),
        out.display()
    );
    Ok(())
}

/// Loads a checkpoint with the config given on the command line, or with
/// its embedded config when none is given.
fn model_from(g: &Global, path: &Path) -> Result<(CompletionModel<f32>, PipelineConfig)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = match &g.config {
        Some(_) => load_config(g)?,
        None => ck.config.clone(),
    };
    let model = ck.into_model(&cfg)?;
    Ok((model, cfg))
}

pub fn complete(g: &Global, checkpoint: &Path, image: &Path, partial: &Path, output: &Path, trace: bool) -> Result<()> {
    let (model, cfg) = model_from(g, checkpoint)?;
    let image = ImageTensor::load_png(image, cfg.encoder.height, cfg.encoder.width)
        .with_context(|| format!("reading {}", image.display()))?;
    let partial = read_xyz(partial)?;
    let out = out_dir(g, &cfg, ".");
    let completion = model.complete(&image, &partial)?;
    fs::create_dir_all(&out)?;
    let target = out.join(output);
    write_xyz(&target, completion.output())?;
    println!("wrote {} points to {}", completion.output().len(), target.display());
    if trace {
        let stages: Vec<&PointCloud> = match &completion.trace {
            Some(t) => t.stages.iter().collect(),
            None => vec![&completion.coarse.points],
        };
        let stem = target.file_stem().and_then(|s| s.to_str()).unwrap_or("completion").to_string();
        for (l, s) in stages.iter().enumerate() {
            write_xyz(target.with_file_name(format!("{stem}.stage{l}.xyz")), s)?;
        }
        println!("wrote {} stage files", stages.len());
    }
    Ok(())
}

pub fn eval(
    g: &Global,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    split: Split,
    tau: Option<f64>,
    plots: bool,
    gt_self: bool,
) -> Result<()> {
    let (model, cfg) = match (&checkpoint, gt_self) {
        (Some(p), _) => {
            let (m, c) = model_from(g, p)?;
            (Some(m), c)
        }
        (None, true) => (None, load_config(g)?),
        (None, false) => return Err(usage("eval needs --checkpoint (or --gt-self)")),
    };
    let tau = tau.unwrap_or(cfg.train.tau);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(usage(format!("--tau must be positive, got {tau}")));
    }
    let root = dataset_root(dataset, &cfg)?;
    let samples = load_split(&root, split, &cfg)?;
    if samples.is_empty() {
        return Err(usage(format!("split {split} of {} is empty", root.display())));
    }
    let report = match (&model, gt_self) {
        (_, true) => {
            let items: Vec<Scored<'_>> = samples
                .iter()
                .map(|s| Scored {
                    category: s.category,
                    pred: &s.gt,
                    gt: &s.gt,
                    stages: &[],
                })
                .collect();
            score(&items, tau)?
        }
        (Some(m), false) => training::evaluate(m, &samples, tau)?,
        (None, false) => unreachable!("checked above"),
    };
    let out = out_dir(g, &cfg, ".");
    fs::create_dir_all(&out)?;
    print!("{}", table(&report));
    let file = out.join(format!("eval_{split}.tsv"));
    fs::write(&file, machine_readable(&report))?;
    println!("wrote {}", file.display());
    if plots {
        let bars: Vec<(String, f64)> = report.categories.iter().map(|c| (c.category.clone(), c.cd * 1e3)).collect();
        plot::bar_chart(&bars, &out.join(format!("cd_per_category_{split}.png")))?;
        if !report.stage_cd.is_empty() {
            let stage: Vec<f64> = report.stage_cd.iter().map(|v| v * 1e3).collect();
            plot::line_chart(&stage, &out.join(format!("cd_per_stage_{split}.png")))?;
        }
    }
    Ok(())
}

fn table(r: &EvalReport) -> String {
    let mut s = format!("tau = {}\n", r.tau);
    s.push_str(&format!("{:<10} {:>8} {:>12} {:>10}\n", "category", "samples", "CD x 1e3", "F1"));
    for row in r.categories.iter().chain(std::iter::once(&r.average)) {
        s.push_str(&format!(
            "{:<10} {:>8} {:>12.4} {:>10.4}\n",
            row.category,
            row.samples,
            row.cd * 1e3,
            row.f1
        ));
    }
    if !r.stage_cd.is_empty() {
        let stages: Vec<String> = r.stage_cd.iter().map(|v| format!("{:.4}", v * 1e3)).collect();
        s.push_str(&format!("stage CD x 1e3: {}\n", stages.join(" ")));
    }
    s
}

fn machine_readable(r: &EvalReport) -> String {
    let mut s = format!("# tau={}\ncategory\tsamples\tcd\tf1\n", r.tau);
    for row in r.categories.iter().chain(std::iter::once(&r.average)) {
        s.push_str(&format!("{}\t{}\t{:?}\t{:?}\n", row.category, row.samples, row.cd, row.f1));
    }
    for (l, v) in r.stage_cd.iter().enumerate() {
        s.push_str(&format!("stage{l}\t{}\t{v:?}\t\n", r.average.samples));
    }
    s
}

pub fn metrics(pred: &Path, gt: &Path, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(usage(format!("--tau must be positive, got {tau}")));
    }
    let p = read_xyz(pred)?;
    let q = read_xyz(gt)?;
    let report = fscore(&p, &q, tau)?;
    println!("chamfer {}", chamfer_distance(&p, &q));
    println!("f1 {}", report.f1);
    println!("precision {}", report.precision);
    println!("recall {}", report.recall);
    println!("tau {}", report.tau);
    Ok(())
}

pub fn inspect(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    println!("variant {}", ck.variant);
    println!("epoch {}", ck.epoch);
    println!("arch_hash {}", ck.arch_hash);
    println!("optimizer_state {}", ck.trainer.is_some());
    for (name, m) in ck.params.iter() {
        println!("param {name} {}x{}", m.rows(), m.cols());
    }
    Ok(())
}
