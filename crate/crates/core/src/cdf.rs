//! Quantized CDF tables.
//!
//! A table holds one integer CDF per coding context. Context `c` covers the
//! integer values `offset[c] .. offset[c] + n[c]`; when the table is built with
//! an escape bin, a value outside that support is coded as the escape symbol
//! followed by its overflow in raw bits (a sign bit, a 5-bit length and the
//! magnitude), so coding never fails on outliers.

use alloc::vec::Vec;
use thiserror::Error;

use crate::coder::{CoderError, RangeDecoder, RangeEncoder};

/// Bits of CDF precision; every table sums to `2^PRECISION`.
pub const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CdfError {
    #[error("pmf is empty, has negative or non-finite entries, or sums to zero")]
    InvalidPmf,
    #[error("{0} symbols do not fit in a {PRECISION}-bit table")]
    TooManySymbols(usize),
    #[error("value {value} is outside the support of context {context}")]
    SupportOverflow { context: usize, value: i32 },
    #[error("context {0} does not exist")]
    NoSuchContext(usize),
    #[error("decoded escape overflow is malformed")]
    BadEscape,
    #[error(transparent)]
    Coder(#[from] CoderError),
}

/// Probabilities for one context before quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPmf {
    /// Value represented by the first probability.
    pub offset: i32,
    pub probs: Vec<f64>,
    /// Mass of everything outside the support; `Some` adds an escape bin.
    pub tail: Option<f64>,
}

/// Quantizes a pmf into a CDF of length `pmf.len() + 1` summing to `2^16`.
///
/// The cumulative distribution is rounded, so each bin is within one quantum
/// of its scaled probability; bins that round to zero are raised to one
/// quantum, paid for by the bins with the largest rounding surplus.
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>, CdfError> {
    let n = pmf.len();
    if n == 0 {
        return Err(CdfError::InvalidPmf);
    }
    if n > TOTAL as usize {
        return Err(CdfError::TooManySymbols(n));
    }
    let mut total = 0.0;
    for &p in pmf {
        if !p.is_finite() || p < 0.0 {
            return Err(CdfError::InvalidPmf);
        }
        total += p;
    }
    if total <= 0.0 {
        return Err(CdfError::InvalidPmf);
    }

    let scale = f64::from(TOTAL) / total;
    let mut freqs = Vec::with_capacity(n);
    let mut surplus = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut prev = 0u32;
    for (i, &p) in pmf.iter().enumerate() {
        acc += p;
        let c = if i + 1 == n { TOTAL } else { libm::round(acc * scale).min(f64::from(TOTAL)) as u32 };
        freqs.push(c - prev);
        surplus.push(f64::from(c - prev) - p * scale);
        prev = c;
    }

    let mut debt = 0u32;
    for f in freqs.iter_mut() {
        if *f == 0 {
            *f = 1;
            debt += 1;
        }
    }
    while debt > 0 {
        // Largest surplus first; ties go to the larger bin, then the lower index.
        let mut best = usize::MAX;
        for i in 0..n {
            if freqs[i] < 2 {
                continue;
            }
            if best == usize::MAX
                || surplus[i] > surplus[best]
                || (surplus[i] == surplus[best] && freqs[i] > freqs[best])
            {
                best = i;
            }
        }
        debug_assert!(best != usize::MAX);
        freqs[best] -= 1;
        surplus[best] -= 1.0;
        debt -= 1;
    }

    let mut cdf = Vec::with_capacity(n + 1);
    let mut c = 0;
    cdf.push(0);
    for f in freqs {
        c += f;
        cdf.push(c);
    }
    debug_assert_eq!(c, TOTAL);
    Ok(cdf)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    /// Concatenated CDFs.
    cdfs: Vec<u32>,
    /// Start of each context's CDF inside `cdfs`.
    starts: Vec<usize>,
    /// Number of in-support symbols per context (the escape bin excluded).
    sizes: Vec<u32>,
    offsets: Vec<i32>,
    escape: bool,
}

impl CdfTable {
    /// Builds a table from per-context pmfs. Either every context carries a
    /// tail mass (escape bins) or none does.
    pub fn from_pmfs(contexts: &[ContextPmf]) -> Result<Self, CdfError> {
        let escape = contexts.first().is_some_and(|c| c.tail.is_some());
        let mut table = CdfTable {
            cdfs: Vec::new(),
            starts: Vec::with_capacity(contexts.len()),
            sizes: Vec::with_capacity(contexts.len()),
            offsets: Vec::with_capacity(contexts.len()),
            escape,
        };
        let mut buf = Vec::new();
        for ctx in contexts {
            if ctx.tail.is_some() != escape || ctx.probs.is_empty() {
                return Err(CdfError::InvalidPmf);
            }
            buf.clear();
            buf.extend_from_slice(&ctx.probs);
            if let Some(t) = ctx.tail {
                buf.push(t.max(0.0));
            }
            let cdf = quantize_pmf(&buf)?;
            table.starts.push(table.cdfs.len());
            table.sizes.push(ctx.probs.len() as u32);
            table.offsets.push(ctx.offset);
            table.cdfs.extend_from_slice(&cdf);
        }
        Ok(table)
    }

    pub fn num_contexts(&self) -> usize {
        self.starts.len()
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    /// Integer CDF of context `ctx`, escape bin included.
    pub fn cdf(&self, ctx: usize) -> Option<&[u32]> {
        let start = *self.starts.get(ctx)?;
        let len = self.sizes[ctx] as usize + 1 + usize::from(self.escape);
        Some(&self.cdfs[start..start + len])
    }

    /// Inclusive value range coded without escape.
    pub fn support(&self, ctx: usize) -> Option<(i32, i32)> {
        let off = *self.offsets.get(ctx)?;
        Some((off, off + self.sizes[ctx] as i32 - 1))
    }

    /// Probability the table assigns to `value` (escape mass for outliers).
    pub fn probability(&self, ctx: usize, value: i32) -> Option<f64> {
        let cdf = self.cdf(ctx)?;
        let (lo, hi) = self.support(ctx)?;
        let s = if value < lo || value > hi {
            if !self.escape {
                return Some(0.0);
            }
            self.sizes[ctx] as usize
        } else {
            (value - lo) as usize
        };
        Some(f64::from(cdf[s + 1] - cdf[s]) / f64::from(TOTAL))
    }

    /// Exact cost in bits of coding `value`, escape overflow included, before
    /// the coder's own rounding.
    pub fn cost_bits(&self, ctx: usize, value: i32) -> Option<f64> {
        let (lo, hi) = self.support(ctx)?;
        let p = self.probability(ctx, value)?;
        if p == 0.0 {
            return None;
        }
        let mut bits = -libm::log2(p);
        if value < lo || value > hi {
            let (value, lo, hi) = (i64::from(value), i64::from(lo), i64::from(hi));
            let overflow = if value < lo { lo - 1 - value } else { value - hi - 1 } as u64;
            bits += f64::from(1 + 5 + bit_length(overflow + 1));
        }
        Some(bits)
    }

    pub fn encode(&self, enc: &mut RangeEncoder, ctx: usize, value: i32) -> Result<(), CdfError> {
        let cdf = self.cdf(ctx).ok_or(CdfError::NoSuchContext(ctx))?;
        let (lo, hi) = (self.offsets[ctx], self.offsets[ctx] + self.sizes[ctx] as i32 - 1);
        if (lo..=hi).contains(&value) {
            enc.encode_symbol(cdf, PRECISION, (value - lo) as usize)?;
            return Ok(());
        }
        if !self.escape {
            return Err(CdfError::SupportOverflow { context: ctx, value });
        }
        enc.encode_symbol(cdf, PRECISION, self.sizes[ctx] as usize)?;
        let (below, overflow) = if value < lo {
            (1, (i64::from(lo) - 1 - i64::from(value)) as u64)
        } else {
            (0, (i64::from(value) - i64::from(hi) - 1) as u64)
        };
        // overflow + 1 >= 1, coded as its bit length (5 bits) then its bits.
        let v = overflow + 1;
        let len = 64 - v.leading_zeros();
        enc.encode_bits(below, 1)?;
        enc.encode_bits(len - 1, 5)?;
        let mut remaining = len;
        while remaining > 0 {
            let chunk = remaining.min(16);
            remaining -= chunk;
            enc.encode_bits(((v >> remaining) & ((1 << chunk) - 1)) as u32, chunk)?;
        }
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>, ctx: usize) -> Result<i32, CdfError> {
        let cdf = self.cdf(ctx).ok_or(CdfError::NoSuchContext(ctx))?;
        let s = dec.decode_symbol(cdf, PRECISION)?;
        let size = self.sizes[ctx] as usize;
        let lo = self.offsets[ctx];
        if s < size {
            return Ok(lo + s as i32);
        }
        let below = dec.decode_bits(1)?;
        let len = dec.decode_bits(5)? + 1;
        if len > 32 {
            return Err(CdfError::BadEscape);
        }
        let mut v: u64 = 0;
        let mut remaining = len;
        while remaining > 0 {
            let chunk = remaining.min(16);
            remaining -= chunk;
            v = (v << chunk) | u64::from(dec.decode_bits(chunk)?);
        }
        let overflow = i64::try_from(v).map_err(|_| CdfError::BadEscape)? - 1;
        let hi = i64::from(lo) + size as i64 - 1;
        let value = if below == 1 { i64::from(lo) - 1 - overflow } else { hi + 1 + overflow };
        i32::try_from(value).map_err(|_| CdfError::BadEscape)
    }

    /// Codes a sequence of `(context, value)` pairs into a fresh byte string.
    pub fn encode_values(&self, items: &[(usize, i32)]) -> Result<Vec<u8>, CdfError> {
        let mut enc = RangeEncoder::new();
        for &(ctx, value) in items {
            self.encode(&mut enc, ctx, value)?;
        }
        Ok(enc.finish())
    }

    /// Inverse of [`CdfTable::encode_values`] given the same context order.
    /// A table that differs from the encoder's yields garbage, not an error.
    pub fn decode_values(&self, bytes: &[u8], contexts: &[usize]) -> Result<Vec<i32>, CdfError> {
        let mut dec = RangeDecoder::new(bytes)?;
        contexts.iter().map(|&ctx| self.decode(&mut dec, ctx)).collect()
    }
}

fn bit_length(v: u64) -> u32 {
    64 - v.leading_zeros()
}
