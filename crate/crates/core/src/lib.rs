#![no_std]
#![warn(missing_debug_implementations)]

//! Pure algorithmic building blocks for a task-aware learned image codec.
//!
//! Everything in this crate depends only on [`core`] and [`alloc`]:
//!
//! * [`prob`]: discretized Gaussian likelihoods, the smooth scale bound, and
//!   rate accounting in bits and bits-per-pixel.
//! * [`cdf`]: 16-bit quantized CDF tables with an escape bin for values
//!   outside a context's support.
//! * [`coder`]: a byte-oriented range coder with exact round trips.
//! * [`bitstream`]: the on-disk container for one compressed image.
//! * [`loss`]: distortion, cross-entropy, top-1 and the weighted joint loss.
//! * [`bd`]: Bjontegaard deltas for rate–accuracy curves, using monotone
//!   piecewise cubic Hermite interpolation.

extern crate alloc;

pub mod bd;
pub mod bitstream;
pub mod cdf;
pub mod coder;
pub mod loss;
pub mod prob;

pub use bd::{bd_metric, bjontegaard, BdError, BdMode, BdResult, CurvePoint, Interpolation};
pub use bitstream::{Bitstream, BitstreamError, Header};
pub use cdf::{CdfError, CdfTable, ContextPmf};
pub use coder::{CoderError, RangeDecoder, RangeEncoder};
pub use loss::{LossError, LossWeights};
pub use prob::{RateEstimate, P_FLOOR, SCALE_MIN};
