//! Training loop and evaluation.
//!
//! Each sample gets its own tape; gradients are averaged over the batch,
//! clipped by global norm and applied with Adam under a cosine learning-rate
//! decay. The sample order of epoch `e` depends only on `(seed, e)`, so a
//! resumed run replays the same sequence as an uninterrupted one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, TrainerState};
use super::loss::{alpha_at, LossBreakdown, LossSchedule};
use super::synth::{ShapeKind, TrainSample};
use super::AblationVariant;
use crate::autodiff::{clip_global_norm, cosine_lr, Adam, Gradients, Graph, Var};
use crate::config::{Downsample, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, fscore, fps_indices, uniform_indices, PointCloud};
use crate::model::{CompletionModel, ForwardVars, KEEP_SEED};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// One epoch of the loss history. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub alpha: f64,
    pub train_loss: f64,
    pub val_cd: f64,
    pub val_f1: f64,
    /// Mean chamfer distance of the output cloud over the epoch's samples.
    pub train_cd: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

const HISTORY_HEADER: &str = "epoch,alpha,train_loss,val_cd,val_f1,train_cd,steps";

impl HistoryRow {
    pub fn to_csv(rows: &[HistoryRow]) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in rows {
            // `{:?}` round-trips f64 exactly.
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{}",
                r.epoch, r.alpha, r.train_loss, r.val_cd, r.val_f1, r.train_cd, r.steps
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Vec<HistoryRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::invalid("history: missing header"));
        }
        lines
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::invalid(format!("history line {}: {line:?}", i + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(bad());
                }
                let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
                Ok(HistoryRow {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    alpha: num(1)?,
                    train_loss: num(2)?,
                    val_cd: num(3)?,
                    val_f1: num(4)?,
                    train_cd: num(5)?,
                    steps: f[6].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }
}

/// Extra differentiable loss term attached to each sample's objective.
pub type AuxLoss = fn(&mut Graph<f32>, &ForwardVars) -> Option<Var>;

pub struct TrainOptions<'a> {
    pub variant: AblationVariant,
    /// Receives `best.ckpt`, `last.ckpt` and `history.csv`.
    pub out_dir: PathBuf,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this many epochs in this call, as if interrupted.
    pub stop_after: Option<usize>,
    pub aux_loss: Option<AuxLoss>,
    pub progress: Option<&'a mut dyn FnMut(&HistoryRow)>,
}

impl TrainOptions<'_> {
    pub fn new(variant: AblationVariant, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            variant,
            out_dir: out_dir.into(),
            resume: false,
            stop_after: None,
            aux_loss: None,
            progress: None,
        }
    }
}

pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub model: CompletionModel<f32>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    /// Whether every configured epoch has run.
    pub finished: bool,
}

/// Builds the objective for one forward pass.
pub fn sample_loss(
    variant: AblationVariant,
    g: &mut Graph<f32>,
    vars: &ForwardVars,
    gt: &PointCloud,
    alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    let coarse = g.chamfer(vars.coarse, gt)?;
    let coarse_cd = g.value(coarse).get(0, 0) as f64;
    let Some(refine) = &vars.refine else {
        return Ok((
            coarse,
            LossBreakdown {
                total: coarse_cd,
                refined_cd: coarse_cd,
                coarse_cd,
                alpha: 0.0,
            },
        ));
    };
    let refined = g.chamfer(*refine.stages.last().expect("nonempty"), gt)?;
    let refined_cd = g.value(refined).get(0, 0) as f64;
    // The refiner-only variant has no trainable coarse stage to supervise.
    let alpha = match variant {
        AblationVariant::Full => alpha,
        _ => 0.0,
    };
    if alpha == 0.0 {
        return Ok((
            refined,
            LossBreakdown {
                total: refined_cd,
                refined_cd,
                coarse_cd,
                alpha,
            },
        ));
    }
    let weighted = g.scale(coarse, alpha as f32);
    let total = g.add(refined, weighted);
    Ok((
        total,
        LossBreakdown {
            total: g.value(total).get(0, 0) as f64,
            refined_cd,
            coarse_cd,
            alpha,
        },
    ))
}

fn kept_indices(cfg: &PipelineConfig, s: &TrainSample, epoch: usize, idx: usize) -> Result<Vec<usize>> {
    match cfg.points.train_downsample {
        Downsample::Fps => fps_indices(&s.partial, cfg.points.keep, KEEP_SEED),
        Downsample::Uniform => {
            let seed = cfg.train.seed ^ ((epoch as u64) << 32) ^ idx as u64;
            uniform_indices(&s.partial, cfg.points.keep, seed)
        }
    }
}

pub fn train(
    cfg: &PipelineConfig,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    opts: TrainOptions<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let TrainOptions {
        variant,
        out_dir,
        resume,
        stop_after,
        aux_loss,
        mut progress,
    } = opts;
    fs::create_dir_all(&out_dir)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let t = &cfg.train;
    let schedule = LossSchedule {
        alpha_start: t.alpha_start,
        alpha_end: t.alpha_end,
        total_epochs: t.epochs,
    };

    let mut model = CompletionModel::<f32>::new(&cfg.arch(), variant, t.seed)?;
    let mut adam = Adam::new(&model.store);
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut start = 0;
    if resume && last_path.exists() {
        let ck = load_checkpoint(&last_path)?;
        if ck.variant != variant {
            return Err(Error::Incompatible(format!(
                "cannot resume a {} run as {variant}",
                ck.variant
            )));
        }
        let state = ck
            .trainer
            .clone()
            .ok_or_else(|| Error::Incompatible("last checkpoint has no optimizer state".into()))?;
        start = ck.epoch;
        model = ck.into_model(cfg)?;
        adam.state = state.adam;
        best = state.best_val_cd;
        history = state.history;
        history.truncate(start);
    }

    let cached: Option<Vec<PointCloud>> = match cfg.points.train_downsample {
        Downsample::Fps => Some(
            train_set
                .iter()
                .map(|s| s.partial.select(&fps_indices(&s.partial, cfg.points.keep, KEEP_SEED)?))
                .collect::<Result<_>>()?,
        ),
        Downsample::Uniform => None,
    };

    let n_batches = train_set.len().div_ceil(t.batch_size);
    let total_steps = (t.epochs * n_batches) as u64;
    let mut ran = 0;
    for epoch in start..t.epochs {
        if stop_after.is_some_and(|k| ran >= k) {
            break;
        }
        let alpha = alpha_at(&schedule, epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut cd_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(t.batch_size).enumerate() {
            let mut grads = Gradients::empty(model.store.len());
            let weight = 1.0 / batch.len() as f32;
            for &i in batch {
                let s = &train_set[i];
                let kept = match &cached {
                    Some(c) => c[i].clone(),
                    None => s.partial.select(&kept_indices(cfg, s, epoch, i)?)?,
                };
                let mut g = Graph::new(&model.store);
                let vars = model.forward(&mut g, &s.image, &kept).map_err(|e| diverged(epoch, b, e))?;
                let (mut loss, parts) = sample_loss(variant, &mut g, &vars, &s.gt, alpha)?;
                if let Some(extra) = aux_loss.and_then(|f| f(&mut g, &vars)) {
                    loss = g.add(loss, extra);
                }
                let value = g.value(loss).get(0, 0) as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        detail: format!("loss is {value}"),
                    });
                }
                loss_sum += value;
                cd_sum += parts.refined_cd;
                grads.accumulate(g.backward(loss), weight);
            }
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            clip_global_norm(&mut grads, t.grad_clip);
            let lr = cosine_lr(t.lr, adam.state.step, total_steps);
            adam.step(&mut model.store, &grads, lr);
        }

        let n = train_set.len() as f64;
        let last = epoch + 1 == t.epochs;
        let validate = !val_set.is_empty() && ((epoch + 1) % t.val_every == 0 || last);
        let (val_cd, val_f1) = if validate {
            let r = evaluate(&model, val_set, t.tau)?;
            (r.average.cd, r.average.f1)
        } else {
            (f64::NAN, f64::NAN)
        };
        let row = HistoryRow {
            epoch: epoch + 1,
            alpha,
            train_loss: loss_sum / n,
            val_cd,
            val_f1,
            train_cd: cd_sum / n,
            steps: adam.state.step,
        };
        // Without a validation split the training CD selects the best model.
        let criterion = if val_set.is_empty() { row.train_cd } else { val_cd };
        if criterion < best {
            best = criterion;
            save_checkpoint(&best_path, &model, cfg, epoch + 1, None)?;
        }
        history.push(row);
        let state = TrainerState {
            adam: adam.state.clone(),
            best_val_cd: best,
            history: history.clone(),
        };
        save_checkpoint(&last_path, &model, cfg, epoch + 1, Some(&state))?;
        fs::write(out_dir.join(HISTORY_FILE), HistoryRow::to_csv(&history))?;
        if let Some(p) = progress.as_mut() {
            p(history.last().expect("just pushed"));
        }
        ran += 1;
    }
    let finished = history.len() == t.epochs;
    Ok(TrainReport {
        history,
        model,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        finished,
    })
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numerical { stage, detail } => Error::Diverged {
            epoch: epoch + 1,
            batch,
            detail: format!("{stage}: {detail}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub samples: usize,
    /// Mean chamfer distance (not scaled).
    pub cd: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub categories: Vec<CategoryRow>,
    /// Mean over all samples.
    pub average: CategoryRow,
    /// Mean chamfer distance of each refinement stage, coarse first. Empty
    /// when the model has no refiner.
    pub stage_cd: Vec<f64>,
}

/// One prediction to score.
pub struct Scored<'a> {
    pub category: ShapeKind,
    pub pred: &'a PointCloud,
    pub gt: &'a PointCloud,
    pub stages: &'a [PointCloud],
}

/// Aggregates per-category and overall metrics.
pub fn score(items: &[Scored<'_>], tau: f64) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut per: BTreeMap<ShapeKind, (usize, f64, f64)> = BTreeMap::new();
    let (mut cd_all, mut f1_all) = (0.0, 0.0);
    let n_stages = items[0].stages.len();
    let mut stage_cd = vec![0.0; n_stages];
    for it in items {
        let cd = chamfer_distance(it.pred, it.gt);
        let f1 = fscore(it.pred, it.gt, tau)?.f1;
        let e = per.entry(it.category).or_default();
        e.0 += 1;
        e.1 += cd;
        e.2 += f1;
        cd_all += cd;
        f1_all += f1;
        if it.stages.len() == n_stages {
            for (acc, s) in stage_cd.iter_mut().zip(it.stages) {
                *acc += chamfer_distance(s, it.gt);
            }
        }
    }
    let n = items.len() as f64;
    Ok(EvalReport {
        tau,
        categories: per
            .into_iter()
            .map(|(k, (c, cd, f1))| CategoryRow {
                category: k.name().to_string(),
                samples: c,
                cd: cd / c as f64,
                f1: f1 / c as f64,
            })
            .collect(),
        average: CategoryRow {
            category: "average".into(),
            samples: items.len(),
            cd: cd_all / n,
            f1: f1_all / n,
        },
        stage_cd: stage_cd.into_iter().map(|v| v / n).collect(),
    })
}

/// Runs the model on every sample and scores the outputs.
pub fn evaluate(model: &CompletionModel<f32>, samples: &[TrainSample], tau: f64) -> Result<EvalReport> {
    let outs = samples
        .iter()
        .map(|s| model.complete(&s.image, &s.partial))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<Scored<'_>> = samples
        .iter()
        .zip(&outs)
        .map(|(s, o)| Scored {
            category: s.category,
            pred: o.output(),
            gt: &s.gt,
            stages: o.trace.as_ref().map_or(&[][..], |t| &t.stages[..]),
        })
        .collect();
    score(&items, tau)
}

/// Loads the history file written by [`train`].
pub fn read_history(dir: &Path) -> Result<Vec<HistoryRow>> {
    HistoryRow::from_csv(&fs::read_to_string(dir.join(HISTORY_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{synth_sample, ShapeParams};
    use rand::Rng;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::compact();
        c.encoder.height = 16;
        c.encoder.width = 16;
        c.encoder.stage_channels = vec![8, 16];
        c.encoder.heads_per_stage = vec![2, 2];
        c.generator.points_per_branch = 8;
        c.generator.n_generated = 32;
        c.generator.latent_width = 16;
        c.refiner.embed_width = 16;
        c.refiner.ffn_width = 32;
        c.refiner.n_stages = 2;
        c.points.n_input = 64;
        c.points.keep = 16;
        c.train.epochs = 3;
        c.train.batch_size = 2;
        c
    }

    fn samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let kind = ShapeKind::ALL[i % 4];
                let params = ShapeParams::random(kind, &mut rng);
                synth_sample(&params, rng.random_range(0..24), rng.random(), 64, (16, 16)).unwrap()
            })
            .collect()
    }

    #[test]
    fn history_csv_round_trip() {
        let rows = vec![HistoryRow {
            epoch: 2,
            alpha: 0.1 + 0.2,
            train_loss: 1e-7,
            val_cd: f64::NAN,
            val_f1: 0.5,
            train_cd: 3.0,
            steps: 9,
        }];
        let back = HistoryRow::from_csv(&HistoryRow::to_csv(&rows)).unwrap();
        assert_eq!(back[0].alpha, rows[0].alpha);
        assert!(back[0].val_cd.is_nan());
        assert_eq!(back[0].steps, 9);
    }

    #[test]
    fn one_epoch_two_batches_two_steps() {
        let mut cfg = tiny();
        cfg.train.epochs = 1;
        let data = samples(4, 1);
        let dir = tempfile::tempdir().unwrap();
        let r = train(&cfg, &data, &data[..2], TrainOptions::new(AblationVariant::Full, dir.path())).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.history[0].steps, 2);
        assert_eq!(r.history[0].alpha, 0.7);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        assert_eq!(read_history(dir.path()).unwrap(), r.history);
    }

    #[test]
    fn full_and_no_recon_differ_by_weighted_coarse_term() {
        let cfg = tiny();
        let data = samples(2, 2);
        let model = CompletionModel::<f32>::new(&cfg.arch(), AblationVariant::Full, 4).unwrap();
        let kept = model.kept_partial(&data[0].partial, KEEP_SEED).unwrap();
        let mut g = Graph::new(&model.store);
        let vars = model.forward(&mut g, &data[0].image, &kept).unwrap();
        let (_, full) = sample_loss(AblationVariant::Full, &mut g, &vars, &data[0].gt, 0.7).unwrap();
        let (_, no) = sample_loss(AblationVariant::NoReconLoss, &mut g, &vars, &data[0].gt, 0.7).unwrap();
        assert_eq!(full.refined_cd, no.refined_cd);
        assert_eq!(full.coarse_cd, no.coarse_cd);
        assert!((full.total - no.total - 0.7 * full.coarse_cd).abs() < 1e-6 * full.total);
        assert_eq!(no.total, no.refined_cd);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny();
        let data = samples(4, 3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = train(&cfg, &data, &data[..2], TrainOptions::new(AblationVariant::Full, a.path())).unwrap();
        let mut opts = TrainOptions::new(AblationVariant::Full, b.path());
        opts.stop_after = Some(1);
        let part = train(&cfg, &data, &data[..2], opts).unwrap();
        assert!(!part.finished);
        let mut opts = TrainOptions::new(AblationVariant::Full, b.path());
        opts.resume = true;
        let rest = train(&cfg, &data, &data[..2], opts).unwrap();
        assert!(rest.finished);
        assert_eq!(rest.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        for (x, y) in full.history.iter().zip(&rest.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_cd.to_bits(), y.val_cd.to_bits());
        }
    }

    #[test]
    fn eval_of_gt_against_itself_is_perfect() {
        let data = samples(6, 5);
        let items: Vec<Scored<'_>> = data
            .iter()
            .map(|s| Scored { category: s.category, pred: &s.gt, gt: &s.gt, stages: &[] })
            .collect();
        let r = score(&items, 0.001).unwrap();
        assert!(r.categories.iter().all(|c| c.cd == 0.0 && c.f1 == 1.0));
        assert_eq!(r.average.samples, 6);
    }

    #[test]
    fn average_is_sample_weighted() {
        let data = samples(7, 6);
        let items: Vec<Scored<'_>> = data
            .iter()
            .map(|s| Scored { category: s.category, pred: &s.partial, gt: &s.gt, stages: &[] })
            .collect();
        let r = score(&items, 0.01).unwrap();
        let weighted: f64 = r.categories.iter().map(|c| c.cd * c.samples as f64).sum::<f64>() / 7.0;
        assert!((weighted - r.average.cd).abs() < 1e-9);
        assert!(score(&[], 0.01).is_err());
    }
}
