//! Byte-oriented range coder.
//!
//! The coder keeps a 32-bit range and a 33-bit `low` with carry propagation
//! through a one-byte cache, in the style of the LZMA range coder. Symbols are
//! coded from cumulative frequencies whose total is a power of two, so the
//! division by the total is a shift.
//!
//! The leading byte that this construction always emits as zero is dropped on
//! both sides. A stream therefore costs exactly four bytes of overhead beyond
//! the normalisation shifts, and the decoder consumes every byte the encoder
//! produced and nothing more.

use alloc::vec::Vec;
use thiserror::Error;

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CoderError {
    #[error("stream ended after {0} bytes but the decoder needs more")]
    Truncated(usize),
    #[error("invalid frequency interval: start {start}, freq {freq}, total 2^{total_bits}")]
    BadInterval { start: u32, freq: u32, total_bits: u32 },
    #[error("symbol index {symbol} outside a table of {len} symbols")]
    SymbolOutOfRange { symbol: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, pending: 1, skip_first: true, out: Vec::new() }
    }

    /// Narrows the interval to `[start, start + freq)` out of `2^total_bits`.
    pub fn encode(&mut self, start: u32, freq: u32, total_bits: u32) -> Result<(), CoderError> {
        let total = 1u64 << total_bits;
        if freq == 0 || total_bits > 16 || u64::from(start) + u64::from(freq) > total {
            return Err(CoderError::BadInterval { start, freq, total_bits });
        }
        let r = self.range >> total_bits;
        self.low += u64::from(start) * u64::from(r);
        self.range = freq * r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    /// Codes symbol `s` of a CDF table (`cdf.len() = n + 1`, last entry `2^precision`).
    pub fn encode_symbol(&mut self, cdf: &[u32], precision: u32, s: usize) -> Result<(), CoderError> {
        if s + 1 >= cdf.len() {
            return Err(CoderError::SymbolOutOfRange { symbol: s, len: cdf.len().saturating_sub(1) });
        }
        self.encode(cdf[s], cdf[s + 1] - cdf[s], precision)
    }

    /// Codes `value` as `nbits` equiprobable bits (`nbits ≤ 16`).
    pub fn encode_bits(&mut self, value: u32, nbits: u32) -> Result<(), CoderError> {
        if nbits == 0 {
            return Ok(());
        }
        self.encode(value, 1, nbits)
    }

    /// Bytes emitted so far, not counting the final flush.
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = Self { code: 0, range: u32::MAX, data, pos: 0 };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Returns the cumulative-frequency target in `[0, 2^total_bits)`; must be
    /// followed by [`RangeDecoder::consume`] with the interval containing it.
    pub fn peek(&mut self, total_bits: u32) -> u32 {
        let r = self.range >> total_bits;
        let v = self.code / r;
        v.min((1 << total_bits) - 1)
    }

    pub fn consume(&mut self, start: u32, freq: u32, total_bits: u32) -> Result<(), CoderError> {
        let r = self.range >> total_bits;
        self.code = self.code.wrapping_sub(start * r);
        self.range = freq * r;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_symbol(&mut self, cdf: &[u32], precision: u32) -> Result<usize, CoderError> {
        let target = self.peek(precision);
        // Last index with cdf[s] <= target.
        let s = cdf.partition_point(|&c| c <= target).saturating_sub(1);
        let s = s.min(cdf.len().saturating_sub(2));
        self.consume(cdf[s], cdf[s + 1] - cdf[s], precision)?;
        Ok(s)
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32, CoderError> {
        if nbits == 0 {
            return Ok(0);
        }
        let v = self.peek(nbits);
        self.consume(v, 1, nbits)?;
        Ok(v)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self.data.get(self.pos).ok_or(CoderError::Truncated(self.data.len()))?;
        self.pos += 1;
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALVES: [u32; 3] = [0, 32768, 65536];

    #[test]
    fn empty_stream_is_flush_only() {
        let bytes = RangeEncoder::new().finish();
        assert!(bytes.len() <= 16);
        assert_eq!(bytes.len(), 4);
        let dec = RangeDecoder::new(&bytes).unwrap();
        assert_eq!(dec.position(), bytes.len());
    }

    #[test]
    fn binary_round_trip_consumes_every_byte() {
        let symbols: Vec<usize> = (0..1000).map(|i| (i * 7 + i / 3) % 2).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode_symbol(&HALVES, 16, s).unwrap();
        }
        let bytes = enc.finish();
        // 1000 fair bits cost 125 bytes plus the flush.
        assert!(bytes.len() <= 125 + 5, "{}", bytes.len());
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let decoded: Vec<usize> = (0..1000).map(|_| dec.decode_symbol(&HALVES, 16).unwrap()).collect();
        assert_eq!(decoded, symbols);
        assert_eq!(dec.position(), bytes.len());
    }

    #[test]
    fn raw_bits_round_trip() {
        let values = [0u32, 1, 65535, 12345, 7, 3];
        let widths = [1u32, 1, 16, 14, 3, 2];
        let mut enc = RangeEncoder::new();
        for (&v, &n) in values.iter().zip(&widths) {
            enc.encode_bits(v, n).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (&v, &n) in values.iter().zip(&widths) {
            assert_eq!(dec.decode_bits(n).unwrap(), v);
        }
    }

    #[test]
    fn carry_propagation_through_ff_runs() {
        // A very skewed table drives `low` against 0xFF.. boundaries.
        let cdf = [0u32, 1, 65536];
        let mut enc = RangeEncoder::new();
        let symbols: Vec<usize> = (0..5000).map(|i| usize::from(i % 97 != 0)).collect();
        for &s in &symbols {
            enc.encode_symbol(&cdf, 16, s).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode_symbol(&cdf, 16).unwrap(), s);
        }
    }

    #[test]
    fn truncated_stream_is_reported() {
        let mut enc = RangeEncoder::new();
        for i in 0..400 {
            enc.encode_symbol(&HALVES, 16, i % 2).unwrap();
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() - 3];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let res: Result<Vec<usize>, _> = (0..400).map(|_| dec.decode_symbol(&HALVES, 16)).collect();
        assert_eq!(res, Err(CoderError::Truncated(cut.len())));
        assert_eq!(RangeDecoder::new(&[0, 1]).unwrap_err(), CoderError::Truncated(2));
    }

    #[test]
    fn rejects_bad_intervals() {
        let mut enc = RangeEncoder::new();
        assert!(enc.encode(0, 0, 16).is_err());
        assert!(enc.encode(65535, 2, 16).is_err());
        assert!(enc.encode_symbol(&HALVES, 16, 2).is_err());
        assert!(enc.encode(0, 1, 17).is_err());
    }
}
