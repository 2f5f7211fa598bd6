//! Discretized Gaussian likelihoods and rate accounting.

use thiserror::Error;

/// Lower bound on every predicted Gaussian scale.
pub const SCALE_MIN: f64 = 0.11;

/// No probability below this value enters the rate loss. Equal to one quantum
/// of a 15-bit table, so the floor and the coder tables agree.
pub const P_FLOOR: f64 = 1.0 / 32768.0;

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ProbError {
    #[error("non-finite input ({0})")]
    NonFinite(&'static str),
    #[error("scale {0} is below the lower bound {SCALE_MIN}")]
    ScaleBelowBound(f64),
    #[error("probability {0} is outside (0, 1]")]
    InvalidProbability(f64),
    #[error("zero image dimension")]
    ZeroDimension,
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Smooth lower bound for predicted scales: `SCALE_MIN + softplus(raw)`.
///
/// Strictly above [`SCALE_MIN`] and differentiable everywhere, approaching
/// `raw` for large inputs.
#[inline]
pub fn bound_scale(raw: f64) -> f64 {
    SCALE_MIN + softplus(raw)
}

/// Derivative of [`bound_scale`] with respect to `raw`.
#[inline]
pub fn bound_scale_grad(raw: f64) -> f64 {
    sigmoid(raw)
}

/// Probability mass of the unit-width bin centred on `v` under `N(mean, scale²)`,
/// before flooring.
///
/// Evaluated on the left tail (`|v - mean|` folded), where `erfc` keeps its
/// relative accuracy.
#[inline]
pub fn gaussian_bin_mass(v: f64, mean: f64, scale: f64) -> f64 {
    let d = libm::fabs(v - mean);
    let upper = normal_cdf((0.5 - d) / scale);
    let lower = normal_cdf((-0.5 - d) / scale);
    upper - lower
}

/// Floored bin likelihood `max(Φ((v+½-μ)/σ) - Φ((v-½-μ)/σ), P_FLOOR)`.
pub fn gaussian_likelihood(v: f64, mean: f64, scale: f64) -> Result<f64, ProbError> {
    check_gaussian_args(v, mean, scale)?;
    Ok(gaussian_bin_mass(v, mean, scale).max(P_FLOOR))
}

/// Floored likelihood with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodGrad {
    pub p: f64,
    pub d_value: f64,
    pub d_mean: f64,
    pub d_scale: f64,
}

/// [`gaussian_likelihood`] together with `∂p/∂v`, `∂p/∂μ`, `∂p/∂σ`.
///
/// Where the floor is active all derivatives are zero, which is the exact
/// derivative of the floored function.
pub fn gaussian_likelihood_grad(v: f64, mean: f64, scale: f64) -> LikelihoodGrad {
    let diff = v - mean;
    let d = libm::fabs(diff);
    let a = (0.5 - d) / scale;
    let b = (-0.5 - d) / scale;
    let p = normal_cdf(a) - normal_cdf(b);
    if p < P_FLOOR {
        return LikelihoodGrad { p: P_FLOOR, d_value: 0.0, d_mean: 0.0, d_scale: 0.0 };
    }
    let (pa, pb) = (normal_pdf(a), normal_pdf(b));
    // ∂p/∂d, then chain through d = |v - μ|; at v = μ the two pdfs cancel.
    let dp_dd = (pb - pa) / scale;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let d_value = dp_dd * sign;
    let d_scale = (b * pb - a * pa) / scale;
    LikelihoodGrad { p, d_value, d_mean: -d_value, d_scale }
}

fn check_gaussian_args(v: f64, mean: f64, scale: f64) -> Result<(), ProbError> {
    if !v.is_finite() {
        return Err(ProbError::NonFinite("value"));
    }
    if !mean.is_finite() {
        return Err(ProbError::NonFinite("mean"));
    }
    if !scale.is_finite() {
        return Err(ProbError::NonFinite("scale"));
    }
    if scale < SCALE_MIN {
        return Err(ProbError::ScaleBelowBound(scale));
    }
    Ok(())
}

/// Information content in bits, `Σ -log2 p`, over every probability given.
pub fn rate_bits<I>(probs: I) -> Result<f64, ProbError>
where
    I: IntoIterator<Item = f64>,
{
    let mut bits = 0.0;
    for p in probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ProbError::InvalidProbability(p));
        }
        bits -= libm::log2(p);
    }
    Ok(bits)
}

/// Bits per pixel for `batch` images of `height × width`.
pub fn bpp_of(total_bits: f64, batch: usize, height: usize, width: usize) -> Result<f64, ProbError> {
    if batch == 0 || height == 0 || width == 0 {
        return Err(ProbError::ZeroDimension);
    }
    Ok(total_bits / (batch * height * width) as f64)
}

/// Split rate estimate for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub total_bits: f64,
    pub bits_y: f64,
    pub bits_z: f64,
    pub bpp: f64,
}

impl RateEstimate {
    pub fn new(
        bits_y: f64,
        bits_z: f64,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, ProbError> {
        let total_bits = bits_y + bits_z;
        let bpp = bpp_of(total_bits, batch, height, width)?;
        Ok(Self { total_bits, bits_y, bits_z, bpp })
    }
}
