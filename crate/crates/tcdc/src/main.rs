use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use tcdc::config::ExperimentConfig;
use tcdc::data::{generate_synthetic_dataset, load_dataset, preprocess, Mode, SynthSpec};
use tcdc::evaluation::{
    ablation_sweep, bd_metric, dump_reconstructions, plot_curves, read_metrics, EvalError, RateAccuracyCurve, RatePoint,
    WeightKind,
};
use tcdc::experiment::{evaluate_and_log, point_file, pretrain_model, train_point, PointKind};
use tcdc::training::{Checkpoint, Weights};
use tcdc_core::bitstream::Bitstream;

#[derive(Parser)]
#[command(name = "tcdc", version, about = "Task-aware learned image compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the raw classifier and base codec, or fine-tune one rate point.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to fine-tune from; without it the raw classifier and base codec are trained.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "joint")]
        kind: PointKind,
        /// Rate weight; defaults to the config's.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split through the real coder.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        tag: String,
    },
    /// Train and evaluate one point per alpha and write the curve.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// A checkpoint, or a directory holding `baseline_alpha_{alpha}.ckpt` per alpha.
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum)]
        kind: PointKind,
        /// Overrides the config's sweep grid.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bjontegaard deltas of a test curve against a reference curve.
    Bd {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Vary one loss weight and tabulate rate and accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum)]
        weight: WeightKind,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value = "joint")]
        kind: PointKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode an image into a bitstream file.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Side length the image is resized to.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Decode a bitstream file into a PNG.
    Decompress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write originals and reconstructions of test images with a bpp manifest.
    ReconDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot rate–accuracy curves from curve files or a metrics log as SVG.
    Plot {
        #[arg(long, value_delimiter = ',')]
        curves: Vec<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value = "Rate-accuracy")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic expression dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 400)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra validation and test images per class, e.g. `60,100`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        holdout: Option<Vec<usize>>,
    },
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load(config: &Path) -> Result<(ExperimentConfig, tcdc::data::Dataset)> {
    let cfg = ExperimentConfig::load(config)?;
    let ds = load_dataset(&cfg.dataset, cfg.seed)?;
    let [tr, va, te] = ds.histogram();
    eprintln!("dataset: train {tr:?}, val {va:?}, test {te:?}");
    Ok((cfg, ds))
}

fn alpha_init(init: &Path, alpha: f64) -> Result<Checkpoint> {
    let path = if init.is_dir() { init.join(point_file(PointKind::Baseline, alpha)) } else { init.to_path_buf() };
    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, init, kind, alpha, out } => {
            let (cfg, ds) = load(&config)?;
            let mut progress = progress;
            let ck = match init {
                None => Checkpoint::new(pretrain_model(&cfg, &ds, &mut progress)?, cfg.seed),
                Some(p) => {
                    let init = Checkpoint::load(&p)?;
                    train_point(&init.model, kind, alpha.unwrap_or(cfg.weights.alpha), &cfg, &ds, &mut progress)?
                }
            };
            ck.save(&out)?;
            print_json(&json!({ "checkpoint": out, "epoch": ck.meta.epoch, "val": ck.meta.val }));
        }
        Command::Eval { config, checkpoint, tag } => {
            let (cfg, ds) = load(&config)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let log = cfg.output_dir.join("metrics.jsonl");
            let eval = evaluate_and_log(&ck, &checkpoint.display().to_string(), &tag, &cfg, &ds, &log)?;
            print_json(&eval.point);
        }
        Command::Sweep { config, init, kind, alphas, out } => {
            let (cfg, ds) = load(&config)?;
            let alphas = match alphas.or_else(|| cfg.sweep.as_ref().map(|s| s.alphas.clone())) {
                Some(a) if !a.is_empty() => a,
                _ => bail!("no alphas given and the config has no [sweep] table"),
            };
            let log = cfg.output_dir.join("metrics.jsonl");
            let mut points = Vec::new();
            let mut progress = progress;
            for &alpha in &alphas {
                let start = alpha_init(&init, alpha)?;
                let ck = train_point(&start.model, kind, alpha, &cfg, &ds, &mut progress)?;
                let file = cfg.output_dir.join(point_file(kind, alpha));
                ck.save(&file)?;
                points.push(evaluate_and_log(&ck, &file.display().to_string(), kind.tag(), &cfg, &ds, &log)?.point);
            }
            let curve = RateAccuracyCurve::new(kind.tag(), points)?;
            curve.save(&out)?;
            print_json(&curve);
        }
        Command::Bd { reference, test, json } => {
            let r = bd_metric(&RateAccuracyCurve::load(&reference)?, &RateAccuracyCurve::load(&test)?)?;
            if json {
                print_json(&r);
            } else {
                println!("bd_accuracy {:.2}", r.bd_accuracy);
                println!("bd_rate {:.2}", r.bd_rate);
            }
        }
        Command::Ablate { config, init, weight, values, kind, out } => {
            let (cfg, ds) = load(&config)?;
            let start = Checkpoint::load(&init)?;
            let log = cfg.output_dir.join("metrics.jsonl");
            let table = ablation_sweep(weight, &values, cfg.weights, |w: Weights| -> Result<RatePoint, EvalError> {
                let run_cfg = ExperimentConfig { weights: w, ..cfg.clone() };
                let ck = train_point(&start.model, kind, w.alpha, &run_cfg, &ds, &mut |m: &str| progress(m))?;
                let value = match weight {
                    WeightKind::Alpha => w.alpha,
                    WeightKind::Beta => w.beta,
                    WeightKind::Gamma => w.gamma,
                };
                let file = cfg.output_dir.join(format!("ablate_{weight:?}_{value}.ckpt").to_lowercase());
                ck.save(&file)?;
                Ok(evaluate_and_log(&ck, &file.display().to_string(), kind.tag(), &run_cfg, &ds, &log)?.point)
            })?;
            std::fs::write(&out, serde_json::to_string_pretty(&table)?).with_context(|| format!("writing {}", out.display()))?;
            print_json(&table);
        }
        Command::Compress { checkpoint, input, output, size } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let x = preprocess(&bytes, size, Mode::Eval, 0)?;
            let bs = ck.model.coder()?.compress(&ck.model.codec, &x, 0)?;
            let encoded = bs.to_bytes().map_err(tcdc::entropy::EntropyError::from)?;
            std::fs::write(&output, &encoded).with_context(|| format!("writing {}", output.display()))?;
            let bpp = (8 * encoded.len()) as f64 / (size * size) as f64;
            print_json(&json!({ "bytes": encoded.len(), "bpp": bpp }));
        }
        Command::Decompress { checkpoint, input, output } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let bs = Bitstream::from_bytes(&bytes).map_err(tcdc::entropy::EntropyError::from)?;
            let x_hat = ck.model.coder()?.decompress(&ck.model.codec, &bs)?;
            tcdc::evaluation::save_png(&x_hat, 0, &output)?;
            print_json(&json!({ "output": output, "height": x_hat.height(), "width": x_hat.width() }));
        }
        Command::ReconDump { config, checkpoints, count, out } => {
            let (_, ds) = load(&config)?;
            let loaded = checkpoints
                .iter()
                .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), Checkpoint::load(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let models: Vec<(&str, &tcdc::training::Model)> = loaded.iter().map(|(id, ck)| (id.as_str(), &ck.model)).collect();
            let entries = dump_reconstructions(&models, &ds.test.take(count), &out)?;
            print_json(&entries);
        }
        Command::Plot { curves, metrics, title, out } => {
            let mut all = curves.iter().map(|p| RateAccuracyCurve::load(p)).collect::<Result<Vec<_>, _>>()?;
            if let Some(m) = metrics {
                let mut by_tag: std::collections::BTreeMap<String, Vec<RatePoint>> = Default::default();
                for r in read_metrics(&m)? {
                    by_tag.entry(r.strategy.clone()).or_default().push(RatePoint {
                        bpp: r.bpp,
                        top1: r.top1,
                        checkpoint: r.checkpoint,
                        strategy: r.strategy,
                        mse: r.mse,
                    });
                }
                for (tag, pts) in by_tag {
                    all.push(RateAccuracyCurve::new(tag, pts)?);
                }
            }
            plot_curves(&all, &title, &out)?;
            print_json(&json!({ "plot": out, "curves": all.len() }));
        }
        Command::SynthData { out, classes, n_per_class, size, seed, holdout } => {
            let spec = SynthSpec { n_per_class, classes, size, seed, holdout_per_class: holdout.map(|h| (h[0], h[1])) };
            let manifest = generate_synthetic_dataset(&out, &spec)?;
            print_json(&json!({ "manifest": manifest }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.first(), "causes": &chain[1..] }));
            ExitCode::from(1)
        }
    }
}
