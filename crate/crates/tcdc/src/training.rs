//! Joint rate/distortion/classification training, early stopping and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tcdc_core::loss::{cross_entropy, joint_loss, mse, mse_grad_into, LossError, LossWeights};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierConfig, ClassifierError, ClassifierTrace};
use crate::codec::{noise_like, round_offset, scale_grad_to_raw, Codec, CodecConfig, CodecError, GaussianParams, Trace};
use crate::data::{flip_horizontal, Split};
use crate::entropy::{gaussian_rate, gaussian_rate_backward, EntropyCoder, EntropyError, FactorizedPrior};
use crate::impl_params;
use crate::nn::{Need, Params};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::Tensor;
use tcdc_core::prob::bound_scale;

pub use crate::data::{preprocess, Mode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {losses:?}")]
    NonFinite { step: u64, losses: Losses },
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStrategy {
    /// Codec fine-tuned under the joint loss; classifier frozen and run in evaluation mode.
    CompressionOnly,
    /// Codec and classifier fine-tuned together.
    Joint,
}

/// Serializable form of [`LossWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Weights {
    pub fn validated(&self) -> Result<LossWeights, LossError> {
        LossWeights::new(self.alpha, self.beta, self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub main: AdamConfig,
    pub aux: AdamConfig,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            main: AdamConfig::adamw(3e-5, 1e-2),
            aux: AdamConfig::adam(3e-5),
            batch_size: 16,
            grad_clip: 0.1,
            max_epochs: 30,
            early_stop_patience: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.main.validate().map_err(TrainError::Config)?;
        self.aux.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 || !(self.grad_clip > 0.0) || self.max_epochs == 0 {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Codec, hyper-latent prior and classifier trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub codec: Codec,
    pub prior: FactorizedPrior,
    pub classifier: Classifier,
}

impl_params!(Model; codec, prior, classifier);

impl Model {
    pub fn new(codec: CodecConfig, classifier: ClassifierConfig, rng: &mut impl Rng) -> Result<Self, TrainError> {
        let codec = Codec::new(codec, rng)?;
        let prior = FactorizedPrior::new("prior", codec.config.channels_hyper, rng);
        let classifier = Classifier::new(classifier, rng)?;
        Ok(Self { codec, prior, classifier })
    }

    pub fn coder(&self) -> Result<EntropyCoder, EntropyError> {
        EntropyCoder::new(&self.prior)
    }
}

/// Loss components of one batch or their mean over a split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    /// Estimated bits per pixel.
    pub bpp: f64,
    pub mse: f64,
    pub ce: f64,
}

impl Losses {
    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.bpp.is_finite() && self.mse.is_finite() && self.ce.is_finite()
    }

    fn accumulate(&mut self, o: &Losses, k: f64) {
        self.total += k * o.total;
        self.bpp += k * o.bpp;
        self.mse += k * o.mse;
        self.ce += k * o.ce;
    }
}

/// Activations of one noisy training pass.
pub struct PassTrace {
    x: Tensor,
    labels: Vec<usize>,
    ga: Trace,
    ha: Trace,
    hs: Trace,
    y_tilde: Tensor,
    z_tilde: Tensor,
    params: GaussianParams,
    raw: Tensor,
    gs: Trace,
    x_hat: Tensor,
    cls: Option<(Vec<f64>, ClassifierTrace)>,
}

/// Forward pass with additive-noise quantization; draws the latent noise, then the
/// hyper-latent noise, then dropout, in that order from `rng`.
pub fn forward_pass(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    w: &LossWeights,
    strategy: TrainStrategy,
    rng: &mut impl Rng,
) -> Result<(Losses, PassTrace), TrainError> {
    let codec = &model.codec;
    codec.check_image(x)?;
    let m = codec.config.channels_m;
    let (y, ga) = codec.ga.forward_trace(x);
    let (z, ha) = codec.ha.forward_trace(&y);
    let mut y_tilde = noise_like(&y, rng);
    y_tilde.add_assign(&y);
    let mut z_tilde = noise_like(&z, rng);
    z_tilde.add_assign(&z);
    let (h, hs) = codec.hs.forward_trace(&z_tilde);
    let (mean, raw) = h.split_channels(m);
    let params = GaussianParams { mean, scale: raw.map(bound_scale) };
    let bits_y = gaussian_rate(&y_tilde, &params)?;
    let bits_z: f64 = model.prior.likelihoods(&z_tilde)?.data.iter().map(|p| -p.log2()).sum();
    let bpp = (bits_y + bits_z) / (x.batch() * x.height() * x.width()) as f64;
    let (x_hat, gs) = codec.gs.forward_trace(&y_tilde);
    let distortion = mse(&x.data, &x_hat.data)?;
    let (ce, cls) = if w.gamma() > 0.0 {
        let dropout = strategy == TrainStrategy::Joint;
        let (logits, t) = model.classifier.forward_trace(&x_hat, dropout, rng)?;
        (cross_entropy(&logits, model.classifier.num_classes(), labels)?, Some((logits, t)))
    } else {
        (0.0, None)
    };
    let losses = Losses { total: f64::NAN, bpp, mse: distortion, ce };
    let total = joint_loss(bpp, distortion, ce, w).unwrap_or(f64::NAN);
    let trace = PassTrace { x: x.clone(), labels: labels.to_vec(), ga, ha, hs, y_tilde, z_tilde, params, raw, gs, x_hat, cls };
    Ok((Losses { total, ..losses }, trace))
}

/// Accumulates `∂L/∂θ` into the parameter gradients. Classifier gradients are only
/// produced under [`TrainStrategy::Joint`]; the quantiles receive none.
pub fn backward_pass(model: &mut Model, t: &PassTrace, w: &LossWeights, strategy: TrainStrategy) -> Result<(), TrainError> {
    let npix = (t.x.batch() * t.x.height() * t.x.width()) as f64;
    let k_rate = w.alpha() / npix;
    let (_, dz_prior) = model.prior.rate_backward(&t.z_tilde, k_rate);
    let g = gaussian_rate_backward(&t.y_tilde, &t.params, k_rate);
    let dh = Tensor::concat_channels(&g.d_mean, &scale_grad_to_raw(&t.raw, &g.d_scale));
    let mut dz = model.codec.hs.backward(&t.hs, dh, Need::ALL).expect("input gradient");
    dz.add_assign(&dz_prior);
    let mut dy = model.codec.ha.backward(&t.ha, dz, Need::ALL).expect("input gradient");

    let mut dx_hat = Tensor::zeros(t.x_hat.shape());
    mse_grad_into(&t.x.data, &t.x_hat.data, w.beta(), &mut dx_hat.data);
    if let Some((logits, ct)) = &t.cls {
        let (_, dl) = model.classifier.loss_grad(logits, &t.labels, w.gamma())?;
        let need = Need { params: strategy == TrainStrategy::Joint, input: true };
        dx_hat.add_assign(&model.classifier.backward(ct, &dl, need).expect("input gradient"));
    }
    dy.add_assign(&model.codec.gs.backward(&t.gs, dx_hat, Need::ALL).expect("input gradient"));
    dy.add_assign(&g.d_value);
    model.codec.ga.backward(&t.ga, dy, Need::PARAMS);
    Ok(())
}

/// Optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub strategy: TrainStrategy,
    pub weights: LossWeights,
    pub config: OptimizerConfig,
    pub main: Adam,
    pub aux: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: Losses,
    pub aux_loss: f64,
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(
        model: Model,
        strategy: TrainStrategy,
        weights: LossWeights,
        config: OptimizerConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            model,
            strategy,
            weights,
            main: Adam::new(config.main),
            aux: Adam::new(config.aux),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    /// One noisy forward/backward pass, gradient clipping, a main step on the in-strategy
    /// parameters and an auxiliary step on the prior.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepReport, TrainError> {
        self.model.zero_grad();
        let (losses, trace) = forward_pass(&self.model, x, labels, &self.weights, self.strategy, &mut self.rng)?;
        if !losses.is_finite() {
            return Err(TrainError::NonFinite { step: self.step, losses });
        }
        backward_pass(&mut self.model, &trace, &self.weights, self.strategy)?;
        let Model { codec, prior, classifier } = &mut self.model;
        let grad_norm = match self.strategy {
            TrainStrategy::CompressionOnly => {
                let norm = clip_grad_norm(&mut [codec], self.config.grad_clip);
                self.main.step(codec);
                norm
            }
            TrainStrategy::Joint => {
                let norm = clip_grad_norm(&mut [codec, classifier], self.config.grad_clip);
                self.main.step_many(&mut [codec, classifier]);
                norm
            }
        };
        let aux_loss = prior.aux_loss_backward();
        self.aux.step(prior);
        self.step += 1;
        Ok(StepReport { losses, aux_loss, grad_norm })
    }

    /// One pass over `train` in a seeded order with random horizontal flips; returns mean losses.
    pub fn train_epoch(&mut self, train: &Split) -> Result<Losses, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset("training"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut mean = Losses::default();
        for idx in order.chunks(self.config.batch_size) {
            let (mut x, labels) = train.batch(idx);
            for b in 0..idx.len() {
                if self.rng.random_bool(0.5) {
                    flip_horizontal(&mut x, b);
                }
            }
            let r = self.train_step(&x, &labels)?;
            mean.accumulate(&r.losses, idx.len() as f64 / train.len() as f64);
        }
        Ok(mean)
    }
}

/// Deterministic losses on hard-quantized latents with the clamped reconstruction and
/// the classifier in evaluation mode.
pub fn evaluate_losses(model: &Model, split: &Split, w: &LossWeights, batch: usize) -> Result<Losses, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let codec = &model.codec;
    let mut mean = Losses::default();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = split.batch(chunk);
        let y = codec.analysis(&x)?;
        let z_hat = codec.hyper_analysis(&y)?.map(f64::round_ties_even);
        let params = codec.hyper_synthesis(&z_hat)?;
        let data = y.data.iter().zip(&params.mean.data).map(|(&v, &m)| round_offset(v, m)).collect();
        let y_hat = Tensor::from_vec(y.shape(), data).expect("latent shape");
        let bits = gaussian_rate(&y_hat, &params)?
            + model.prior.likelihoods(&z_hat)?.data.iter().map(|p| -p.log2()).sum::<f64>();
        let bpp = bits / (x.batch() * x.height() * x.width()) as f64;
        let x_hat = codec.synthesis(&y_hat)?.clamp01();
        let distortion = mse(&x.data, &x_hat.data)?;
        let ce = if w.gamma() > 0.0 {
            let logits = model.classifier.classify(&x_hat)?;
            cross_entropy(&logits, model.classifier.num_classes(), &labels)?
        } else {
            0.0
        };
        let total = joint_loss(bpp, distortion, ce, w)?;
        mean.accumulate(&Losses { total, bpp, mse: distortion, ce }, chunk.len() as f64 / split.len() as f64);
    }
    Ok(mean)
}

/// Patience-based early stopping on a loss to minimize.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0, epoch: 0 }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience { StopDecision::Stop } else { StopDecision::Continue }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: Weights,
    pub strategy: TrainStrategy,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Losses,
    pub val: Losses,
}

pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains until `max_epochs` or until the validation loss stops improving for
/// `early_stop_patience` epochs; returns the best-validation model.
pub fn fit(model: Model, cfg: &TrainConfig, train: &Split, val: &Split) -> Result<FitOutcome, TrainError> {
    fit_with(model, cfg, train, val, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    model: Model,
    cfg: &TrainConfig,
    train: &Split,
    val: &Split,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let w = cfg.weights.validated()?;
    let mut state = TrainState::new(model, cfg.strategy, w, cfg.optimizer, cfg.seed)?;
    let mut stopper = EarlyStopper::new(cfg.optimizer.early_stop_patience.max(1));
    let mut history = Vec::new();
    let mut best = None;
    for epoch in 1..=cfg.optimizer.max_epochs {
        let train_losses = state.train_epoch(train)?;
        let val_losses = evaluate_losses(&state.model, val, &w, cfg.optimizer.batch_size)?;
        let rec = EpochRecord { epoch, train: train_losses, val: val_losses };
        on_epoch(&rec);
        history.push(rec);
        match stopper.observe(val_losses.total) {
            StopDecision::Improved => best = Some((state.model.clone(), rec)),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let (model, rec) = match best {
        Some(b) => b,
        None => (state.model, *history.last().expect("at least one epoch")),
    };
    let meta = CheckpointMeta {
        codec: model.codec.config,
        classifier: model.classifier.config,
        weights: Some(cfg.weights),
        strategy: Some(cfg.strategy),
        epoch: rec.epoch,
        val: Some(rec.val),
        seed: cfg.seed,
        layout: Vec::new(),
    };
    Ok(FitOutcome { checkpoint: Checkpoint { model, meta }, history })
}

/// Trains the classifier alone on raw images with cross-entropy; returns the
/// best-validation-accuracy weights and the per-epoch `(train_ce, val_accuracy)`.
pub fn pretrain_classifier(
    mut classifier: Classifier,
    cfg: &OptimizerConfig,
    train: &Split,
    val: &Split,
    seed: u64,
) -> Result<(Classifier, Vec<(f64, f64)>), TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset(if train.is_empty() { "training" } else { "validation" }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.main);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience.max(1));
    let mut history = Vec::new();
    let mut best = classifier.clone();
    for _ in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut mean_ce = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (mut x, labels) = train.batch(idx);
            for b in 0..idx.len() {
                if rng.random_bool(0.5) {
                    flip_horizontal(&mut x, b);
                }
            }
            classifier.zero_grad();
            let (logits, trace) = classifier.forward_train(&x, &mut rng)?;
            let (ce, dl) = classifier.loss_grad(&logits, &labels, 1.0)?;
            if !ce.is_finite() {
                return Err(TrainError::Config(format!("non-finite classifier loss {ce}")));
            }
            classifier.backward(&trace, &dl, Need::PARAMS);
            clip_grad_norm(&mut [&mut classifier], cfg.grad_clip);
            opt.step(&mut classifier);
            mean_ce += ce * idx.len() as f64 / train.len() as f64;
        }
        let acc = classifier_accuracy(&classifier, val, cfg.batch_size)?;
        history.push((mean_ce, acc));
        match stopper.observe(-acc) {
            StopDecision::Improved => best = classifier.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok((best, history))
}

/// Top-1 accuracy of the classifier on the raw images of a split.
pub fn classifier_accuracy(classifier: &Classifier, split: &Split, batch: usize) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = split.batch(chunk);
        let logits = classifier.classify(&x)?;
        correct += tcdc_core::loss::top1_correct(&logits, classifier.num_classes(), &labels)?;
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

/// Self-describing metadata stored ahead of the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub codec: CodecConfig,
    pub classifier: ClassifierConfig,
    pub weights: Option<Weights>,
    pub strategy: Option<TrainStrategy>,
    pub epoch: usize,
    pub val: Option<Losses>,
    pub seed: u64,
    /// Parameter names and lengths in blob order; filled in on save.
    #[serde(default)]
    pub layout: Vec<(String, usize)>,
}

/// A model plus the metadata of the run that produced it.
///
/// File layout: `TCKP`, a little-endian `u32` version, a `u64` header length, the
/// JSON-encoded [`CheckpointMeta`], then every parameter as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        let meta = CheckpointMeta {
            codec: model.codec.config,
            classifier: model.classifier.config,
            weights: None,
            strategy: None,
            epoch: 0,
            val: None,
            seed,
            layout: Vec::new(),
        };
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.layout = crate::gradcheck::layout(&self.model);
        let header = serde_json::to_vec(&meta).expect("metadata serializes");
        let values = self.model.flat_values();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut model = Model::new(meta.codec, meta.classifier, &mut ChaCha8Rng::seed_from_u64(0))?;
        if crate::gradcheck::layout(&model) != meta.layout {
            return Err(bad("parameter layout does not match the stored configuration"));
        }
        let blob = &bytes[16 + hlen..];
        if blob.len() != 8 * model.num_params() {
            return Err(TrainError::Checkpoint(format!("expected {} parameters, found {} bytes", model.num_params(), blob.len())));
        }
        let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        model.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = vals.next().expect("length checked")));
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
