//! Rate–accuracy measurement from real bitstreams, Bjontegaard deltas, sweeps and dumps.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use tcdc_core::bitstream::Bitstream;
use tcdc_core::bd::{bjontegaard, BdError, CurvePoint, Interpolation};
use tcdc_core::loss::{mse, top1_correct};
use thiserror::Error;

use crate::data::Split;
use crate::entropy::EntropyError;
use crate::tensor::Tensor;
use crate::training::{Model, TrainError, Weights};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bd(#[from] BdError),
    #[error("invalid curve '{0}': {1}")]
    Curve(String, String),
    #[error("{0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// One measured operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Mean over images of bitstream bits per pixel, header included.
    pub bpp: f64,
    pub top1: f64,
    pub checkpoint: String,
    pub strategy: String,
    /// Mean squared error of the clamped reconstructions.
    #[serde(default)]
    pub mse: f64,
}

/// Per-image measurements behind a [`RatePoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub bytes: usize,
    pub payload_bits: usize,
    pub bpp: f64,
    pub mse: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub point: RatePoint,
    pub images: Vec<ImageRecord>,
}

impl Evaluation {
    pub fn total_bytes(&self) -> usize {
        self.images.iter().map(|r| r.bytes).sum()
    }
}

/// Compresses and decodes one image; returns the reconstruction and its bitstream size.
pub fn code_image(model: &Model, x: &Tensor) -> Result<(Tensor, usize, usize), EvalError> {
    let coder = model.coder()?;
    let bs = coder.compress(&model.codec, x, 0)?;
    let bytes = bs.to_bytes().map_err(EntropyError::from)?;
    let x_hat = coder.decompress(&model.codec, &Bitstream::from_bytes(&bytes).map_err(EntropyError::from)?)?;
    Ok((x_hat, bytes.len(), bs.payload_bits()))
}

/// Codes every image of `split` through the real entropy coder, decodes it and
/// classifies the reconstruction in evaluation mode.
pub fn evaluate_model(model: &Model, split: &Split, checkpoint: &str, strategy: &str) -> Result<Evaluation, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Invalid("empty evaluation set".into()));
    }
    let coder = model.coder()?;
    let classes = model.classifier.num_classes();
    let mut images = Vec::with_capacity(split.len());
    const CHUNK: usize = 16;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let mut recon = Vec::with_capacity(chunk.len());
        let mut records = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (x, _) = split.batch(&[i]);
            let bs = coder.compress(&model.codec, &x, 0)?;
            let x_hat = coder.decompress(&model.codec, &bs)?;
            let bytes = bs.byte_len();
            records.push(ImageRecord {
                path: split.paths[i].clone(),
                bytes,
                payload_bits: bs.payload_bits(),
                bpp: (8 * bytes) as f64 / (x.height() * x.width()) as f64,
                mse: mse(&x.data, &x_hat.data).map_err(TrainError::from)?,
                correct: false,
            });
            recon.extend_from_slice(&x_hat.data);
        }
        let x_hat = Tensor::from_vec([chunk.len(), 3, split.size, split.size], recon).expect("batch length");
        let logits = model.classifier.classify(&x_hat).map_err(TrainError::from)?;
        for (k, r) in records.iter_mut().enumerate() {
            let label = split.labels[chunk[k]];
            r.correct = top1_correct(&logits[k * classes..(k + 1) * classes], classes, &[label]).map_err(TrainError::from)? == 1;
        }
        images.extend(records);
    }
    let n = images.len() as f64;
    let point = RatePoint {
        bpp: images.iter().map(|r| r.bpp).sum::<f64>() / n,
        top1: images.iter().filter(|r| r.correct).count() as f64 / n,
        checkpoint: checkpoint.to_string(),
        strategy: strategy.to_string(),
        mse: images.iter().map(|r| r.mse).sum::<f64>() / n,
    };
    Ok(Evaluation { point, images })
}

/// Accuracy of the model's classifier on decoded images and on the raw images.
pub fn cross_domain_eval(model: &Model, split: &Split) -> Result<(f64, f64), EvalError> {
    let compressed = evaluate_model(model, split, "", "")?.point.top1;
    let raw = crate::training::classifier_accuracy(&model.classifier, split, 16)?;
    Ok((compressed, raw))
}

/// Labelled rate–accuracy curve with strictly increasing bpp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAccuracyCurve {
    pub label: String,
    pub points: Vec<RatePoint>,
}

impl RateAccuracyCurve {
    /// Sorts the points by rate and checks the curve invariants.
    pub fn new(label: impl Into<String>, mut points: Vec<RatePoint>) -> Result<Self, EvalError> {
        let label = label.into();
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.iter().any(|p| !(p.bpp.is_finite() && p.bpp > 0.0 && (0.0..=1.0).contains(&p.top1))) {
            return Err(EvalError::Curve(label, "bpp must be positive and finite, top1 in [0, 1]".into()));
        }
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(EvalError::Curve(label, "bpp values must be distinct".into()));
        }
        Ok(Self { label, points })
    }

    pub fn core_points(&self) -> Vec<CurvePoint> {
        self.points.iter().map(|p| CurvePoint { bpp: p.bpp, accuracy: p.top1 }).collect()
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| EvalError::Curve(path.display().to_string(), e.to_string()))?;
        Self::new(c.label, c.points)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        write_file(path, serde_json::to_string_pretty(self).expect("curve serializes").as_bytes())
    }
}

/// Bjontegaard deltas of a test curve against a reference curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdReport {
    /// Percentage points.
    pub bd_accuracy: f64,
    /// Percent.
    pub bd_rate: f64,
    /// `log10(bpp)` range integrated for BD-accuracy.
    pub rate_overlap: (f64, f64),
    /// Accuracy range (percentage points) integrated for BD-rate.
    pub accuracy_overlap: (f64, f64),
    /// Points merged by isotonic regularization before inversion.
    pub pooled_points: usize,
}

/// PCHIP Bjontegaard deltas over the overlapping ranges.
pub fn bd_metric(reference: &RateAccuracyCurve, test: &RateAccuracyCurve) -> Result<BdReport, EvalError> {
    let r = bjontegaard(&reference.core_points(), &test.core_points(), Interpolation::Pchip)?;
    Ok(BdReport {
        bd_accuracy: r.bd_accuracy,
        bd_rate: r.bd_rate,
        rate_overlap: r.rate_overlap,
        accuracy_overlap: r.accuracy_overlap,
        pooled_points: r.pooled_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Alpha,
    Beta,
    Gamma,
}

impl WeightKind {
    pub fn apply(self, base: Weights, v: f64) -> Weights {
        match self {
            WeightKind::Alpha => Weights { alpha: v, ..base },
            WeightKind::Beta => Weights { beta: v, ..base },
            WeightKind::Gamma => Weights { gamma: v, ..base },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub point: RatePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub weight: WeightKind,
    pub rows: Vec<AblationRow>,
    /// `(value, error message)` of runs that failed.
    pub failures: Vec<(f64, String)>,
}

/// Varies one loss weight while holding the others at `base`; `run` trains and
/// evaluates one model. Failed runs are recorded and the sweep continues.
pub fn ablation_sweep(
    weight: WeightKind,
    values: &[f64],
    base: Weights,
    mut run: impl FnMut(Weights) -> Result<RatePoint, EvalError>,
) -> Result<AblationTable, EvalError> {
    if values.len() < 3 {
        return Err(EvalError::Invalid(format!("an ablation needs at least 3 values, got {}", values.len())));
    }
    let mut table = AblationTable { weight, rows: Vec::new(), failures: Vec::new() };
    for &v in values {
        match run(weight.apply(base, v)) {
            Ok(point) => table.rows.push(AblationRow { value: v, point }),
            Err(e) => table.failures.push((v, e.to_string())),
        }
    }
    Ok(table)
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub checkpoint: String,
    pub bpp: f64,
    pub top1: f64,
    pub mse: f64,
    pub strategy: String,
    pub weights: Option<Weights>,
    pub seed: u64,
    pub total_bytes: usize,
    pub image_bytes: Vec<usize>,
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn from_evaluation(
        run_id: &str,
        eval: &Evaluation,
        weights: Option<Weights>,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            checkpoint: eval.point.checkpoint.clone(),
            bpp: eval.point.bpp,
            top1: eval.point.top1,
            mse: eval.point.mse,
            strategy: eval.point.strategy.clone(),
            weights,
            seed,
            total_bytes: eval.total_bytes(),
            image_bytes: eval.images.iter().map(|r| r.bytes).collect(),
            config_hash: config_hash.to_string(),
        }
    }

    /// The bpp implied by the recorded byte counts.
    pub fn bpp_from_bytes(&self, height: usize, width: usize) -> f64 {
        let n = self.image_bytes.len().max(1) as f64;
        self.image_bytes.iter().map(|&b| (8 * b) as f64 / (height * width) as f64).sum::<f64>() / n
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EvalError::Other(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes item `b` of a `[0, 1]` tensor as an 8-bit PNG.
pub fn save_png(t: &Tensor, b: usize, path: &Path) -> Result<(), EvalError> {
    let (h, w) = (t.height(), t.width());
    let item = t.item(b);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (item[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| EvalError::Other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconEntry {
    pub image: String,
    pub checkpoint: String,
    pub file: String,
    pub bpp: f64,
    pub mse: f64,
}

/// Writes every original and each model's reconstruction as PNG, plus a
/// `manifest.json` sidecar with the measured bpp of each reconstruction.
pub fn dump_reconstructions(models: &[(&str, &Model)], samples: &Split, dir: &Path) -> Result<Vec<ReconEntry>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Invalid("no sample images".into()));
    }
    let mut entries = Vec::new();
    for i in 0..samples.len() {
        let (x, _) = samples.batch(&[i]);
        save_png(&x, 0, &dir.join(format!("original_{i:03}.png")))?;
        for (id, model) in models {
            let (x_hat, bytes, _) = code_image(model, &x)?;
            let file = format!("{id}_{i:03}.png");
            save_png(&x_hat, 0, &dir.join(&file))?;
            entries.push(ReconEntry {
                image: samples.paths[i].clone(),
                checkpoint: id.to_string(),
                file,
                bpp: (8 * bytes) as f64 / (x.height() * x.width()) as f64,
                mse: mse(&x.data, &x_hat.data).map_err(TrainError::from)?,
            });
        }
    }
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&entries).expect("serializes").as_bytes())?;
    Ok(entries)
}

/// Rate–accuracy chart of one or more curves as SVG.
pub fn plot_curves(curves: &[RateAccuracyCurve], title: &str, path: &Path) -> Result<(), EvalError> {
    let pts: Vec<&RatePoint> = curves.iter().flat_map(|c| &c.points).collect();
    if pts.is_empty() {
        return Err(EvalError::Invalid("nothing to plot".into()));
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.bpp), b.max(p.bpp)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.top1), b.max(p.top1)));
    let pad_x = ((x1 - x0) * 0.05).max(1e-3);
    let pad_y = ((y1 - y0) * 0.05).max(1e-3);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let draw = || -> Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d((x0 - pad_x)..(x1 + pad_x), (100.0 * (y0 - pad_y))..(100.0 * (y1 + pad_y)))?;
        chart.configure_mesh().x_desc("bpp").y_desc("top-1 accuracy (%)").draw()?;
        for (k, c) in curves.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            let series: Vec<(f64, f64)> = c.points.iter().map(|p| (p.bpp, 100.0 * p.top1)).collect();
            chart
                .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))?
                .label(c.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(series.into_iter().map(|(x, y)| Circle::new((x, y), 3, color.filled())))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| EvalError::Other(format!("plot {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierConfig, Depth};
    use crate::codec::{Activation, CodecConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let codec = CodecConfig { channels_n: 8, channels_m: 8, channels_hyper: 4, activation: Activation::Gdn };
        let cls = ClassifierConfig { depth: Depth::Resnet8Toy, num_classes: 3, dropout: 0.1 };
        Model::new(codec, cls, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn split(n: usize) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Split {
            size: 64,
            pixels: (0..n * 3 * 64 * 64).map(|_| rng.random()).collect(),
            labels: (0..n).map(|i| i % 3).collect(),
            paths: (0..n).map(|i| format!("img{i}.png")).collect(),
        }
    }

    fn point(bpp: f64, top1: f64) -> RatePoint {
        RatePoint { bpp, top1, checkpoint: String::new(), strategy: String::new(), mse: 0.0 }
    }

    #[test]
    fn evaluation_is_deterministic_and_byte_backed() {
        let (m, s) = (model(), split(3));
        let a = evaluate_model(&m, &s, "ck", "joint").unwrap();
        assert_eq!(a, evaluate_model(&m, &s, "ck", "joint").unwrap());
        assert!(a.point.bpp > 0.0 && (0.0..=1.0).contains(&a.point.top1));
        let rec = MetricsRecord::from_evaluation("run", &a, None, 1, "hash");
        assert!((rec.bpp_from_bytes(64, 64) - rec.bpp).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("metrics.jsonl");
        append_metrics(&log, &rec).unwrap();
        append_metrics(&log, &rec).unwrap();
        assert_eq!(read_metrics(&log).unwrap(), [rec.clone(), rec]);

        let (c, r) = cross_domain_eval(&m, &s).unwrap();
        assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn reconstruction_dump_counts_and_matches_evaluation() {
        let (m, s) = (model(), split(2));
        let dir = tempfile::tempdir().unwrap();
        let entries = dump_reconstructions(&[("lo", &m), ("hi", &m)], &s, dir.path()).unwrap();
        let pngs = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png").count();
        assert_eq!(pngs, 2 * 2 + 2);
        let eval = evaluate_model(&m, &s, "", "").unwrap();
        for e in entries.iter().filter(|e| e.checkpoint == "lo") {
            let r = eval.images.iter().find(|r| r.path == e.image).unwrap();
            assert!((r.bpp - e.bpp).abs() <= 1e-9);
        }
        assert!(dump_reconstructions(&[("lo", &m)], &s.take(0), dir.path()).is_err());
    }

    #[test]
    fn curve_and_bd_wrappers() {
        let pts = [(0.1, 0.4), (0.2, 0.5), (0.4, 0.6), (0.8, 0.7)];
        let a = RateAccuracyCurve::new("a", pts.iter().rev().map(|&(b, t)| point(b, t)).collect()).unwrap();
        assert!(a.points.windows(2).all(|w| w[0].bpp < w[1].bpp));
        let r = bd_metric(&a, &a).unwrap();
        assert_eq!((r.bd_accuracy, r.bd_rate), (0.0, 0.0));
        let half = RateAccuracyCurve::new("h", pts.iter().map(|&(b, t)| point(b / 2.0, t)).collect()).unwrap();
        let r = bd_metric(&a, &half).unwrap();
        assert!((r.bd_rate + 50.0).abs() < 1e-9 && r.bd_accuracy > 0.0);
        assert!(RateAccuracyCurve::new("d", vec![point(0.1, 0.5), point(0.1, 0.6)]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        a.save(&p).unwrap();
        assert_eq!(RateAccuracyCurve::load(&p).unwrap(), a);
        let svg = dir.path().join("plot.svg");
        plot_curves(&[a, half], "test", &svg).unwrap();
        assert!(fs::read_to_string(svg).unwrap().contains("<svg"));
    }

    #[test]
    fn ablation_records_failures_and_rejects_short_grids() {
        let base = Weights { alpha: 1.0, beta: 10.0, gamma: 1.0 };
        assert!(ablation_sweep(WeightKind::Alpha, &[1.0], base, |_| unreachable!()).is_err());
        let t = ablation_sweep(WeightKind::Beta, &[1.0, 2.0, 3.0], base, |w| {
            assert_eq!(w.alpha, 1.0);
            if w.beta == 2.0 { Err(EvalError::Other("diverged".into())) } else { Ok(point(w.beta, 0.5)) }
        })
        .unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.failures, [(2.0, "diverged".to_string())]);
    }
}
