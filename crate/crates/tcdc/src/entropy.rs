//! Entropy models for `ŷ` and `ẑ`, coder tables, and compress/decompress.

use std::f64::consts::LN_2;
use std::sync::OnceLock;

use rand::Rng;
use tcdc_core::bitstream::{Bitstream, BitstreamError, Header};
use tcdc_core::cdf::{CdfError, CdfTable, ContextPmf};
use tcdc_core::prob::{
    gaussian_bin_mass, gaussian_likelihood, gaussian_likelihood_grad, normal_cdf, sigmoid, softplus, ProbError,
    RateEstimate, P_FLOOR, SCALE_MIN,
};
use thiserror::Error;

use crate::codec::{round_offset, Codec, CodecError, GaussianParams};
use crate::impl_params;
use crate::nn::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Cdf(#[from] CdfError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("bitstream header {found:?} does not match the model (M={m}, N_h={nh})")]
    HeaderMismatch { found: Header, m: usize, nh: usize },
    #[error("image of {0}x{1} pixels does not fit the 16-bit header fields")]
    TooLarge(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Hidden widths of the per-channel cumulative network, with the scalar input and output.
const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;
/// Logit targets of the lower/upper quantiles: `±ln(2/1e-9 - 1)`.
const TAIL_LOGIT: f64 = 21.416_413_017_506_358;

/// Per-channel learned CDF of the hyper-latent.
///
/// `logit(x) = f_4 ∘ … ∘ f_1(x)` with `f_i(h) = g_i(softplus(H_i)·h + b_i)` and
/// `g_i(u) = u + tanh(a_i)·tanh(u)` on hidden layers. Positive weights and
/// `|tanh(a)| < 1` keep it increasing, so `sigmoid(logit)` is a CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrior {
    pub channels: usize,
    pub matrices: Vec<Param>,
    pub biases: Vec<Param>,
    pub factors: Vec<Param>,
    /// `(C, 3)`: lower tail, median, upper tail.
    pub quantiles: Param,
}

impl_params!(FactorizedPrior; matrices, biases, factors, quantiles);

/// Intermediate values of one scalar evaluation.
#[derive(Debug, Clone, Copy, Default)]
struct CdfTrace {
    inputs: [[f64; 3]; LAYERS],
    pre: [[f64; 3]; LAYERS],
}

impl FactorizedPrior {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..LAYERS {
            let (din, dout) = (DIMS[i], DIMS[i + 1]);
            let init = (1.0 / dout as f64).exp_m1().ln();
            matrices.push(Param::new(format!("{name}.matrix{i}"), &[channels, dout, din], vec![init; channels * dout * din]));
            biases.push(Param::uniform(format!("{name}.bias{i}"), &[channels, dout], 0.5, rng));
            if i < LAYERS - 1 {
                factors.push(Param::new(format!("{name}.factor{i}"), &[channels, dout], vec![0.0; channels * dout]));
            }
        }
        let q = (0..channels).flat_map(|_| [-10.0, 0.0, 10.0]).collect();
        let quantiles = Param::new(format!("{name}.quantiles"), &[channels, 3], q);
        Self { channels, matrices, biases, factors, quantiles }
    }

    fn eval(&self, c: usize, x: f64, trace: Option<&mut CdfTrace>) -> f64 {
        let mut t = CdfTrace::default();
        let mut h = [x, 0.0, 0.0];
        for i in 0..LAYERS {
            let (din, dout) = (DIMS[i], DIMS[i + 1]);
            let m = &self.matrices[i].value[c * dout * din..(c + 1) * dout * din];
            let b = &self.biases[i].value[c * dout..(c + 1) * dout];
            t.inputs[i] = h;
            let mut u = [0.0; 3];
            for o in 0..dout {
                u[o] = b[o] + (0..din).map(|k| softplus(m[o * din + k]) * h[k]).sum::<f64>();
            }
            t.pre[i] = u;
            if i < LAYERS - 1 {
                let f = &self.factors[i].value[c * dout..(c + 1) * dout];
                for o in 0..dout {
                    u[o] += f[o].tanh() * u[o].tanh();
                }
            }
            h = u;
        }
        if let Some(out) = trace {
            *out = t;
        }
        h[0]
    }

    /// Backpropagates `g = ∂L/∂logit`, optionally accumulating parameter gradients; returns `∂L/∂x`.
    fn backward(&mut self, c: usize, t: &CdfTrace, g: f64, accumulate: bool) -> f64 {
        let mut gh = [g, 0.0, 0.0];
        for i in (0..LAYERS).rev() {
            let (din, dout) = (DIMS[i], DIMS[i + 1]);
            let mut gu = gh;
            if i < LAYERS - 1 {
                let fr = c * dout..(c + 1) * dout;
                for o in 0..dout {
                    let th = t.pre[i][o].tanh();
                    let a = self.factors[i].value[fr.start + o].tanh();
                    if accumulate {
                        self.factors[i].grad[fr.start + o] += gh[o] * (1.0 - a * a) * th;
                    }
                    gu[o] = gh[o] * (1.0 + a * (1.0 - th * th));
                }
            }
            let base = c * dout * din;
            let mut prev = [0.0; 3];
            for o in 0..dout {
                if accumulate {
                    self.biases[i].grad[c * dout + o] += gu[o];
                }
                for k in 0..din {
                    let w = self.matrices[i].value[base + o * din + k];
                    if accumulate {
                        self.matrices[i].grad[base + o * din + k] += gu[o] * t.inputs[i][k] * sigmoid(w);
                    }
                    prev[k] += gu[o] * softplus(w);
                }
            }
            gh = prev;
        }
        gh[0]
    }

    /// `logit(x)` for channel `c`; `sigmoid` of it is the CDF.
    pub fn logit(&self, c: usize, x: f64) -> f64 {
        self.eval(c, x, None)
    }

    /// Unfloored mass of the unit bin centred on `v`, evaluated on the side where it is most precise.
    pub fn bin_mass(&self, c: usize, v: f64) -> f64 {
        let (l, u) = (self.logit(c, v - 0.5), self.logit(c, v + 0.5));
        if l + u > 0.0 {
            sigmoid(-l) - sigmoid(-u)
        } else {
            sigmoid(u) - sigmoid(l)
        }
    }

    /// Floored likelihood of `v` in channel `c`.
    pub fn likelihood(&self, c: usize, v: f64) -> f64 {
        self.bin_mass(c, v).max(P_FLOOR)
    }

    /// Floored likelihoods of every element of a `(B, C, h, w)` tensor.
    pub fn likelihoods(&self, z: &Tensor) -> Result<Tensor, EntropyError> {
        z.check_finite("hyper-latent").map_err(|_| EntropyError::NonFinite("hyper-latent"))?;
        let p = z.plane();
        let data = z.data.iter().enumerate().map(|(i, &v)| self.likelihood((i / p) % z.channels(), v)).collect();
        Ok(Tensor::from_vec(z.shape(), data).expect("same shape"))
    }

    /// Total `-log2 p` of `z`; accumulates parameter gradients scaled by `scale` and
    /// returns the per-element gradient of `scale · bits` w.r.t. `z`.
    pub fn rate_backward(&mut self, z: &Tensor, scale: f64) -> (f64, Tensor) {
        let p = z.plane();
        let mut bits = 0.0;
        let mut dz = Tensor::zeros(z.shape());
        let (mut tl, mut tu) = (CdfTrace::default(), CdfTrace::default());
        for (i, &v) in z.data.iter().enumerate() {
            let c = (i / p) % z.channels();
            let l = self.eval(c, v - 0.5, Some(&mut tl));
            let u = self.eval(c, v + 0.5, Some(&mut tu));
            let mass = if l + u > 0.0 { sigmoid(-l) - sigmoid(-u) } else { sigmoid(u) - sigmoid(l) };
            if mass < P_FLOOR {
                bits -= P_FLOOR.log2();
                continue;
            }
            bits -= mass.log2();
            let dbits = -scale / (mass * LN_2);
            let gu = dbits * sigmoid(u) * sigmoid(-u);
            let gl = -dbits * sigmoid(l) * sigmoid(-l);
            dz.data[i] = self.backward(c, &tu, gu, true) + self.backward(c, &tl, gl, true);
        }
        (bits, dz)
    }

    /// Quantile calibration loss `Σ |logit(q) - target|`; gradients go to the quantiles only.
    pub fn aux_loss_backward(&mut self) -> f64 {
        let targets = [-TAIL_LOGIT, 0.0, TAIL_LOGIT];
        let mut loss = 0.0;
        let mut t = CdfTrace::default();
        for c in 0..self.channels {
            for (k, &target) in targets.iter().enumerate() {
                let q = self.quantiles.value[3 * c + k];
                let diff = self.eval(c, q, Some(&mut t)) - target;
                loss += diff.abs();
                let slope = self.backward(c, &t, 1.0, false);
                self.quantiles.grad[3 * c + k] += diff.signum() * slope;
            }
        }
        loss
    }

    pub fn aux_loss(&self) -> f64 {
        let targets = [-TAIL_LOGIT, 0.0, TAIL_LOGIT];
        (0..self.channels)
            .flat_map(|c| targets.iter().enumerate().map(move |(k, &t)| (c, k, t)))
            .map(|(c, k, t)| (self.logit(c, self.quantiles.value[3 * c + k]) - t).abs())
            .sum()
    }

    /// Per-channel median estimates.
    pub fn medians(&self) -> Vec<f64> {
        self.quantiles.value.chunks_exact(3).map(|q| q[1]).collect()
    }

    /// Coder table with one context per channel over the integers between the tail quantiles.
    pub fn cdf_table(&self) -> Result<CdfTable, EntropyError> {
        const MAX_HALF_WIDTH: f64 = 4096.0;
        let pmfs = (0..self.channels)
            .map(|c| {
                let q = &self.quantiles.value[3 * c..3 * c + 3];
                let lo = q[0].min(q[2]).clamp(-MAX_HALF_WIDTH, MAX_HALF_WIDTH).floor() as i32;
                let hi = q[2].max(q[0]).clamp(-MAX_HALF_WIDTH, MAX_HALF_WIDTH).ceil() as i32;
                let probs = (lo..=hi).map(|v| self.bin_mass(c, f64::from(v))).collect();
                let tail = sigmoid(self.logit(c, f64::from(lo) - 0.5)) + sigmoid(-self.logit(c, f64::from(hi) + 0.5));
                ContextPmf { offset: lo, probs, tail: Some(tail) }
            })
            .collect::<Vec<_>>();
        Ok(CdfTable::from_pmfs(&pmfs)?)
    }
}

/// Total `-log2 p` of `v` under the Gaussian conditional.
pub fn gaussian_rate(v: &Tensor, params: &GaussianParams) -> Result<f64, EntropyError> {
    let mut bits = 0.0;
    for ((&v, &m), &s) in v.data.iter().zip(&params.mean.data).zip(&params.scale.data) {
        bits -= gaussian_likelihood(v, m, s)?.log2();
    }
    Ok(bits)
}

/// Gradients of `scale · Σ -log2 p` w.r.t. value, mean and scale.
pub struct GaussianRateGrad {
    pub bits: f64,
    pub d_value: Tensor,
    pub d_mean: Tensor,
    pub d_scale: Tensor,
}

pub fn gaussian_rate_backward(v: &Tensor, params: &GaussianParams, scale: f64) -> GaussianRateGrad {
    let shape = v.shape();
    let (mut dv, mut dm, mut ds) = (Tensor::zeros(shape), Tensor::zeros(shape), Tensor::zeros(shape));
    let mut bits = 0.0;
    for i in 0..v.len() {
        let g = gaussian_likelihood_grad(v.data[i], params.mean.data[i], params.scale.data[i]);
        bits -= g.p.log2();
        let k = -scale / (g.p * LN_2);
        dv.data[i] = k * g.d_value;
        dm.data[i] = k * g.d_mean;
        ds.data[i] = k * g.d_scale;
    }
    GaussianRateGrad { bits, d_value: dv, d_mean: dm, d_scale: ds }
}

/// Largest Gaussian scale represented in the coder's scale table.
pub const SCALE_MAX: f64 = 256.0;
/// Number of scale contexts.
pub const SCALE_LEVELS: usize = 64;
/// Bins whose mass falls below this are left to the escape path.
const SUPPORT_MASS: f64 = 1.0 / 65536.0;

/// Geometric grid of Gaussian scales with one coding context each.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTable {
    pub scales: Vec<f64>,
    log_step: f64,
}

impl Default for ScaleTable {
    fn default() -> Self {
        let log_step = (SCALE_MAX / SCALE_MIN).ln() / (SCALE_LEVELS - 1) as f64;
        let scales = (0..SCALE_LEVELS).map(|i| SCALE_MIN * (log_step * i as f64).exp()).collect();
        Self { scales, log_step }
    }
}

impl ScaleTable {
    /// Context whose scale is nearest to `s` in the log domain.
    pub fn index(&self, s: f64) -> usize {
        let i = ((s / SCALE_MIN).ln() / self.log_step).round();
        if i.is_nan() {
            0
        } else {
            i.clamp(0.0, (SCALE_LEVELS - 1) as f64) as usize
        }
    }
}

/// Centred residual pmf for scale `s` over `[-K, K]` plus its two-sided tail mass.
pub fn gaussian_residual_pmf(s: f64) -> ContextPmf {
    let mut k = 0i32;
    while k < 30_000 && gaussian_bin_mass(f64::from(k + 1), 0.0, s) >= SUPPORT_MASS {
        k += 1;
    }
    let probs = (-k..=k).map(|v| gaussian_bin_mass(f64::from(v), 0.0, s)).collect();
    let tail = 2.0 * normal_cdf(-(f64::from(k) + 0.5) / s);
    ContextPmf { offset: -k, probs, tail: Some(tail) }
}

/// Build a table with one context per scale.
pub fn gaussian_table(scales: &[f64]) -> Result<CdfTable, EntropyError> {
    let pmfs: Vec<_> = scales.iter().map(|&s| gaussian_residual_pmf(s)).collect();
    Ok(CdfTable::from_pmfs(&pmfs)?)
}

/// The scale grid and its table, built once per process.
pub fn gaussian_tables() -> &'static (ScaleTable, CdfTable) {
    static TABLES: OnceLock<(ScaleTable, CdfTable)> = OnceLock::new();
    TABLES.get_or_init(|| {
        let st = ScaleTable::default();
        let table = gaussian_table(&st.scales).expect("scale grid yields valid pmfs");
        (st, table)
    })
}

/// Hard-quantized latents of one image as the coder sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedLatents {
    pub z_hat: Tensor,
    pub params: GaussianParams,
    pub y_hat: Tensor,
}

/// Integer symbols and contexts of the latent residuals.
fn y_symbols(y: &Tensor, params: &GaussianParams) -> Result<Vec<(usize, i32)>, EntropyError> {
    let (st, _) = gaussian_tables();
    y.check_finite("latent").map_err(|_| EntropyError::NonFinite("latent"))?;
    Ok(y.data
        .iter()
        .zip(&params.mean.data)
        .zip(&params.scale.data)
        .map(|((&v, &m), &s)| (st.index(s), to_symbol(v - m)))
        .collect())
}

fn to_symbol(v: f64) -> i32 {
    v.round_ties_even().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}

/// Channel index of every element of a `(1, C, h, w)` tensor.
fn channel_contexts(shape: [usize; 4]) -> Vec<usize> {
    let p = shape[2] * shape[3];
    (0..shape[1] * p).map(|i| i / p).collect()
}

/// Entropy coder bound to one trained model.
#[derive(Debug, Clone)]
pub struct EntropyCoder {
    pub z_table: CdfTable,
}

impl EntropyCoder {
    pub fn new(prior: &FactorizedPrior) -> Result<Self, EntropyError> {
        Ok(Self { z_table: prior.cdf_table()? })
    }

    /// Quantized latents of a single image `(1, 3, H, W)` without coding them.
    pub fn quantize(&self, codec: &Codec, x: &Tensor) -> Result<CodedLatents, EntropyError> {
        let y = codec.analysis(x)?;
        let z = codec.hyper_analysis(&y)?;
        z.check_finite("hyper-latent").map_err(|_| EntropyError::NonFinite("hyper-latent"))?;
        let z_hat = z.map(|v| f64::from(to_symbol(v)));
        let params = codec.hyper_synthesis(&z_hat)?;
        let data = y.data.iter().zip(&params.mean.data).map(|(&v, &mu)| round_offset(v, mu)).collect();
        let y_hat = Tensor::from_vec(y.shape(), data).expect("same shape");
        Ok(CodedLatents { z_hat, params, y_hat })
    }

    pub fn compress(&self, codec: &Codec, x: &Tensor, quality: u8) -> Result<Bitstream, EntropyError> {
        let (h, w) = (x.height(), x.width());
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(EntropyError::TooLarge(h, w));
        }
        let q = self.quantize(codec, x)?;
        let z_items: Vec<(usize, i32)> =
            channel_contexts(q.z_hat.shape()).into_iter().zip(q.z_hat.data.iter().map(|&v| v as i32)).collect();
        let z_payload = self.z_table.encode_values(&z_items)?;
        let y_payload = gaussian_tables().1.encode_values(&y_symbols(&q.y_hat, &q.params)?)?;
        let header = Header {
            quality,
            height: h as u16,
            width: w as u16,
            channels_m: codec.config.channels_m as u16,
            channels_hyper: codec.config.channels_hyper as u16,
        };
        Ok(Bitstream { header, z_payload, y_payload })
    }

    /// Recovers the quantized latents from a bitstream.
    pub fn decode_latents(&self, codec: &Codec, b: &Bitstream) -> Result<CodedLatents, EntropyError> {
        let hd = b.header;
        let (m, nh) = (codec.config.channels_m, codec.config.channels_hyper);
        let (h, w) = (hd.height as usize, hd.width as usize);
        let d = crate::codec::DOWNSAMPLE;
        if hd.channels_m as usize != m || hd.channels_hyper as usize != nh || h % d != 0 || w % d != 0 || h == 0 || w == 0
        {
            return Err(EntropyError::HeaderMismatch { found: hd, m, nh });
        }
        let z_shape = [1, nh, h / d, w / d];
        let z_vals = self.z_table.decode_values(&b.z_payload, &channel_contexts(z_shape))?;
        let z_hat = Tensor::from_vec(z_shape, z_vals.into_iter().map(f64::from).collect()).expect("decoded count");
        let params = codec.hyper_synthesis(&z_hat)?;
        let (st, table) = gaussian_tables();
        let ctx: Vec<usize> = params.scale.data.iter().map(|&s| st.index(s)).collect();
        let r = table.decode_values(&b.y_payload, &ctx)?;
        let data = r.iter().zip(&params.mean.data).map(|(&r, &mu)| f64::from(r) + mu).collect();
        let y_hat = Tensor::from_vec(params.mean.shape(), data).expect("decoded count");
        Ok(CodedLatents { z_hat, params, y_hat })
    }

    /// Reconstruction in `[0, 1]`.
    pub fn decompress(&self, codec: &Codec, b: &Bitstream) -> Result<Tensor, EntropyError> {
        let lat = self.decode_latents(codec, b)?;
        Ok(codec.synthesis(&lat.y_hat)?.clamp01())
    }

    /// Model rate of the hard-quantized latents of one image (the training objective on rounded values).
    pub fn rate_estimate(&self, codec: &Codec, prior: &FactorizedPrior, x: &Tensor) -> Result<RateEstimate, EntropyError> {
        let q = self.quantize(codec, x)?;
        let bits_z: f64 = prior.likelihoods(&q.z_hat)?.data.iter().map(|p| -p.log2()).sum();
        let bits_y = gaussian_rate(&q.y_hat, &q.params)?;
        Ok(RateEstimate::new(bits_y, bits_z, 1, x.height(), x.width())?)
    }
}
