//! Analysis/synthesis transforms, the hyper pair, and quantization.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tcdc_core::prob::{bound_scale, bound_scale_grad};
use thiserror::Error;

use crate::impl_params;
use crate::nn::{relu, relu_backward, Conv2d, ConvTranspose2d, Gdn, Init, Need, Param, Params};
use crate::tensor::{Tensor, TensorError};

/// Total spatial downsampling from image to hyper-latent.
pub const DOWNSAMPLE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("image size {0}x{1} is not divisible by {DOWNSAMPLE}")]
    Size(usize, usize),
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("round_offset quantization needs an offset tensor")]
    MissingOffset,
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gdn,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub channels_n: usize,
    pub channels_m: usize,
    pub channels_hyper: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Gdn
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { channels_n: 64, channels_m: 96, channels_hyper: 48, activation: Activation::Gdn }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let CodecConfig { channels_n: n, channels_m: m, channels_hyper: h, .. } = *self;
        if n == 0 || m == 0 || h == 0 {
            return Err(CodecError::Config("channel counts must be positive".into()));
        }
        if 2 * m < n {
            return Err(CodecError::Config(format!("channels_m ({m}) must be at least channels_n/2 ({n}/2)")));
        }
        if n > u16::MAX as usize || m > u16::MAX as usize || h > u16::MAX as usize {
            return Err(CodecError::Config("channel counts must fit in 16 bits".into()));
        }
        Ok(())
    }
}

/// One stage of a feed-forward transform.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Gdn(Gdn),
    Relu,
}

impl Params for Layer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Conv(l) => l.visit(f),
            Layer::ConvT(l) => l.visit(f),
            Layer::Gdn(l) => l.visit(f),
            Layer::Relu => {}
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(l) => l.visit_mut(f),
            Layer::ConvT(l) => l.visit_mut(f),
            Layer::Gdn(l) => l.visit_mut(f),
            Layer::Relu => {}
        }
    }
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvT(l) => l.forward(x),
            Layer::Gdn(l) => l.forward(x),
            Layer::Relu => relu(x),
        }
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor, need: Need) -> Option<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(x, dy, need),
            Layer::ConvT(l) => l.backward(x, dy, need),
            Layer::Gdn(l) => l.backward(x, dy, need),
            Layer::Relu => need.input.then(|| relu_backward(x, dy)),
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl_params!(Sequential; layers);

/// Inputs to every layer of a [`Sequential`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
}

impl Sequential {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    pub fn forward_trace(&self, x: &Tensor) -> (Tensor, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let next = l.forward(&h);
            inputs.push(h);
            h = next;
        }
        (h, Trace { inputs })
    }

    /// Backpropagates `dy`; returns the input gradient when `need.input`.
    pub fn backward(&mut self, trace: &Trace, dy: Tensor, need: Need) -> Option<Tensor> {
        let mut d = dy;
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            let here = Need { params: need.params, input: i > 0 || need.input };
            d = l.backward(&trace.inputs[i], &d, here)?;
        }
        Some(d)
    }
}

/// Per-element Gaussian mean and (bounded) scale of the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Noise,
    Round,
    RoundOffset,
}

/// The four transforms of the mean-scale hyperprior codec.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub ga: Sequential,
    pub gs: Sequential,
    pub ha: Sequential,
    pub hs: Sequential,
}

impl_params!(Codec; ga, gs, ha, hs);

impl Codec {
    pub fn new(config: CodecConfig, rng: &mut impl Rng) -> Result<Self, CodecError> {
        config.validate()?;
        let CodecConfig { channels_n: n, channels_m: m, channels_hyper: nh, activation } = config;
        let act = |name: String, c: usize, inverse: bool| match activation {
            Activation::Gdn => Layer::Gdn(Gdn::new(&name, c, inverse)),
            Activation::Relu => Layer::Relu,
        };
        let conv = |name: &str, cin, cout, k, s, rng: &mut _| Layer::Conv(Conv2d::new(name, cin, cout, k, s, k / 2, Init::Uniform, rng));
        let tconv = |name: &str, cin, cout, rng: &mut _| Layer::ConvT(ConvTranspose2d::new(name, cin, cout, 5, 2, 2, 1, rng));

        let mut ga = Vec::new();
        for (i, (cin, cout)) in [(3, n), (n, n), (n, n), (n, m)].into_iter().enumerate() {
            ga.push(conv(&format!("ga.{i}"), cin, cout, 5, 2, rng));
            if i < 3 {
                ga.push(act(format!("ga.gdn{i}"), cout, false));
            }
        }
        let mut gs = Vec::new();
        for (i, (cin, cout)) in [(m, n), (n, n), (n, n), (n, 3)].into_iter().enumerate() {
            gs.push(tconv(&format!("gs.{i}"), cin, cout, rng));
            if i < 3 {
                gs.push(act(format!("gs.igdn{i}"), cout, true));
            }
        }
        let ha = vec![
            conv("ha.0", m, nh, 3, 1, rng),
            Layer::Relu,
            conv("ha.1", nh, nh, 5, 2, rng),
            Layer::Relu,
            conv("ha.2", nh, nh, 5, 2, rng),
        ];
        let mid = (3 * m).div_ceil(2);
        let hs = vec![
            tconv("hs.0", nh, nh, rng),
            Layer::Relu,
            tconv("hs.1", nh, mid, rng),
            Layer::Relu,
            conv("hs.2", mid, 2 * m, 3, 1, rng),
        ];
        Ok(Self {
            config,
            ga: Sequential { layers: ga },
            gs: Sequential { layers: gs },
            ha: Sequential { layers: ha },
            hs: Sequential { layers: hs },
        })
    }

    pub fn check_image(&self, x: &Tensor) -> Result<(), CodecError> {
        if x.channels() != 3 {
            return Err(CodecError::Channels { expected: 3, got: x.channels() });
        }
        if x.height() % DOWNSAMPLE != 0 || x.width() % DOWNSAMPLE != 0 || x.height() == 0 || x.width() == 0 {
            return Err(CodecError::Size(x.height(), x.width()));
        }
        x.check_finite("image").map_err(|_| CodecError::NonFinite("image"))
    }

    fn check_channels(x: &Tensor, expected: usize, what: &'static str) -> Result<(), CodecError> {
        if x.channels() != expected {
            return Err(CodecError::Channels { expected, got: x.channels() });
        }
        x.check_finite(what).map_err(|_| CodecError::NonFinite(what))
    }

    /// `x (B,3,H,W) → y (B,M,H/16,W/16)`.
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor, CodecError> {
        self.check_image(x)?;
        Ok(self.ga.forward(x))
    }

    /// `ŷ (B,M,h,w) → x̂ (B,3,16h,16w)`, unclamped.
    pub fn synthesis(&self, y_hat: &Tensor) -> Result<Tensor, CodecError> {
        Self::check_channels(y_hat, self.config.channels_m, "latent")?;
        Ok(self.gs.forward(y_hat))
    }

    /// `y (B,M,h,w) → z (B,N_h,h/4,w/4)`, on the signed latent.
    pub fn hyper_analysis(&self, y: &Tensor) -> Result<Tensor, CodecError> {
        Self::check_channels(y, self.config.channels_m, "latent")?;
        Ok(self.ha.forward(y))
    }

    /// `ẑ → (μ, σ)` with `σ = 0.11 + softplus(raw)`.
    pub fn hyper_synthesis(&self, z_hat: &Tensor) -> Result<GaussianParams, CodecError> {
        Self::check_channels(z_hat, self.config.channels_hyper, "hyper-latent")?;
        let (mean, raw) = self.hs.forward(z_hat).split_channels(self.config.channels_m);
        Ok(GaussianParams { mean, scale: raw.map(bound_scale) })
    }
}

/// Gradient of a loss w.r.t. the raw scale, given its gradient w.r.t. the bounded scale.
pub fn scale_grad_to_raw(raw: &Tensor, d_scale: &Tensor) -> Tensor {
    let data = raw.data.iter().zip(&d_scale.data).map(|(&r, &d)| d * bound_scale_grad(r)).collect();
    Tensor::from_vec(raw.shape(), data).expect("same shape")
}

/// `round(t - m) + m`.
///
/// `round(o - m)` recovers the integer exactly; `o - m` itself can differ from
/// it by an ulp when `r + m` is not representable.
pub fn round_offset(t: f64, m: f64) -> f64 {
    (t - m).round_ties_even() + m
}

/// Quantization proxy (`Noise`, training only) or hard quantization (`Round`, `RoundOffset`).
pub fn quantize(t: &Tensor, mode: QuantMode, offset: Option<&Tensor>, rng: &mut impl Rng) -> Result<Tensor, CodecError> {
    match mode {
        QuantMode::Noise => {
            let mut out = noise_like(t, rng);
            out.add_assign(t);
            Ok(out)
        }
        QuantMode::Round => Ok(t.map(f64::round_ties_even)),
        QuantMode::RoundOffset => {
            let m = offset.ok_or(CodecError::MissingOffset)?;
            t.expect_shape(m.shape())?;
            let data = t.data.iter().zip(&m.data).map(|(&v, &mu)| round_offset(v, mu)).collect();
            Ok(Tensor::from_vec(t.shape(), data)?)
        }
    }
}

/// Additive uniform noise draw, shaped like `t`; pinning it makes training passes deterministic.
pub fn noise_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(t.shape(), (0..t.len()).map(|_| rng.random_range(-0.5..0.5)).collect()).expect("same length")
}
