//! Rate-sweep experiments comparing training strategies.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::evaluation::{
    append_metrics, bd_metric, evaluate_model, BdReport, EvalError, Evaluation, MetricsRecord, RateAccuracyCurve,
};
use crate::training::{fit_with, pretrain_classifier, Checkpoint, Model, TrainConfig, TrainStrategy, Weights};

/// How a rate point is trained from its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    /// Rate and distortion only; the classifier is untouched.
    Baseline,
    CompressionOnly,
    Joint,
}

impl PointKind {
    pub fn tag(self) -> &'static str {
        match self {
            PointKind::Baseline => "baseline",
            PointKind::CompressionOnly => "compression_only",
            PointKind::Joint => "joint",
        }
    }

    pub fn strategy(self) -> TrainStrategy {
        match self {
            PointKind::Joint => TrainStrategy::Joint,
            _ => TrainStrategy::CompressionOnly,
        }
    }

    pub fn weights(self, w: Weights) -> Weights {
        match self {
            PointKind::Baseline => Weights { gamma: 0.0, ..w },
            _ => w,
        }
    }
}

/// Progress messages of long runs.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Trains the raw-image classifier and the rate + distortion base codec.
pub fn pretrain_model(cfg: &ExperimentConfig, ds: &Dataset, progress: Progress) -> Result<Model, EvalError> {
    let pre = cfg.pretrain();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(cfg.codec, cfg.classifier, &mut rng)?;
    let (classifier, hist) = pretrain_classifier(model.classifier.clone(), &pre.classifier, &ds.train, &ds.val, cfg.seed ^ 1)?;
    for (i, (ce, acc)) in hist.iter().enumerate() {
        progress(&format!("classifier epoch {}: train ce {ce:.4}, val top1 {acc:.4}", i + 1));
    }
    let tc = TrainConfig {
        optimizer: pre.codec,
        weights: Weights { alpha: pre.codec_alpha, beta: cfg.weights.beta, gamma: 0.0 },
        strategy: TrainStrategy::CompressionOnly,
        seed: cfg.seed ^ 2,
    };
    let out = fit_with(Model { classifier, ..model }, &tc, &ds.train, &ds.val, |r| {
        progress(&format!(
            "base codec epoch {}: val loss {:.4}, bpp {:.4}, mse {:.6}",
            r.epoch, r.val.total, r.val.bpp, r.val.mse
        ))
    })?;
    Ok(out.checkpoint.model)
}

/// Fine-tunes one rate point from `init`.
pub fn train_point(
    init: &Model,
    kind: PointKind,
    alpha: f64,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    progress: Progress,
) -> Result<Checkpoint, EvalError> {
    let tc = TrainConfig {
        optimizer: cfg.optimizer,
        weights: kind.weights(Weights { alpha, ..cfg.weights }),
        strategy: kind.strategy(),
        seed: cfg.seed ^ alpha.to_bits() ^ kind as u64,
    };
    let out = fit_with(init.clone(), &tc, &ds.train, &ds.val, |r| {
        progress(&format!(
            "{} alpha {alpha}: epoch {} val loss {:.4}, bpp {:.4}, mse {:.6}, ce {:.4}",
            kind.tag(),
            r.epoch,
            r.val.total,
            r.val.bpp,
            r.val.mse,
            r.val.ce
        ))
    })?;
    Ok(out.checkpoint)
}

/// Checkpoint file name of a sweep point.
pub fn point_file(kind: PointKind, alpha: f64) -> String {
    format!("{}_alpha_{alpha}.ckpt", kind.tag())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub baseline: RateAccuracyCurve,
    pub compression_only: RateAccuracyCurve,
    pub joint: RateAccuracyCurve,
    pub bd_compression_only: BdReport,
    pub bd_joint: BdReport,
    /// Checkpoints of the joint runs, by alpha.
    pub joint_checkpoints: Vec<(f64, PathBuf)>,
}

/// Evaluates a checkpoint on the test split and appends it to the metrics log.
pub fn evaluate_and_log(
    ck: &Checkpoint,
    id: &str,
    tag: &str,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    log: &Path,
) -> Result<Evaluation, EvalError> {
    let eval = evaluate_model(&ck.model, &ds.test, id, tag)?;
    let rec = MetricsRecord::from_evaluation(&cfg.output_dir.display().to_string(), &eval, ck.meta.weights, cfg.seed, &cfg.hash());
    append_metrics(log, &rec)?;
    Ok(eval)
}

/// For every alpha: fine-tunes a baseline from `base`, then compression-only and
/// joint runs from that baseline; evaluates all three and computes both BD pairs
/// against the baseline curve. Checkpoints, curves and the metrics log go to `cfg.output_dir`.
pub fn compare_strategies(
    base: &Model,
    alphas: &[f64],
    cfg: &ExperimentConfig,
    ds: &Dataset,
    progress: Progress,
) -> Result<StrategyComparison, EvalError> {
    let dir = &cfg.output_dir;
    let log = dir.join("metrics.jsonl");
    let mut points: [Vec<_>; 3] = Default::default();
    let mut joint_checkpoints = Vec::new();
    for &alpha in alphas {
        let baseline = train_point(base, PointKind::Baseline, alpha, cfg, ds, progress)?;
        for (k, kind) in [PointKind::Baseline, PointKind::CompressionOnly, PointKind::Joint].into_iter().enumerate() {
            let ck = if kind == PointKind::Baseline {
                baseline.clone()
            } else {
                train_point(&baseline.model, kind, alpha, cfg, ds, progress)?
            };
            let file = dir.join(point_file(kind, alpha));
            ck.save(&file)?;
            let eval = evaluate_and_log(&ck, &file.display().to_string(), kind.tag(), cfg, ds, &log)?;
            progress(&format!(
                "{} alpha {alpha}: bpp {:.4}, top1 {:.4}, mse {:.6}",
                kind.tag(),
                eval.point.bpp,
                eval.point.top1,
                eval.point.mse
            ));
            if kind == PointKind::Joint {
                joint_checkpoints.push((alpha, file));
            }
            points[k].push(eval.point);
        }
    }
    let [b, c, j] = points;
    let baseline = RateAccuracyCurve::new("baseline", b)?;
    let compression_only = RateAccuracyCurve::new("compression_only", c)?;
    let joint = RateAccuracyCurve::new("joint", j)?;
    for c in [&baseline, &compression_only, &joint] {
        c.save(&dir.join(format!("curve_{}.json", c.label)))?;
    }
    let bd_compression_only = bd_metric(&baseline, &compression_only)?;
    let bd_joint = bd_metric(&baseline, &joint)?;
    Ok(StrategyComparison { baseline, compression_only, joint, bd_compression_only, bd_joint, joint_checkpoints })
}
