//! Container for one compressed image.
//!
//! ```text
//! "TCDC"            4 bytes magic
//! version           u8 (= 1)
//! quality tag       u8
//! H, W, M, N_h      u16 each
//! z_payload_len     u32, then z_payload
//! y_payload_len     u32, then y_payload
//! ```
//!
//! All integers are big-endian.

use alloc::vec::Vec;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TCDC";
pub const VERSION: u8 = 1;
/// Bytes before the first payload byte.
pub const FIXED_OVERHEAD: usize = 4 + 1 + 1 + 2 * 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BitstreamError {
    #[error("bad magic, not a TCDC stream")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("stream truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} unexpected bytes after the y payload")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes does not fit the u32 length field")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Header {
    pub quality: u8,
    pub height: u16,
    pub width: u16,
    pub channels_m: u16,
    pub channels_hyper: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    /// Total serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        FIXED_OVERHEAD + self.z_payload.len() + self.y_payload.len()
    }

    /// Bits spent on entropy-coded payloads, container fields excluded.
    pub fn payload_bits(&self) -> usize {
        8 * (self.z_payload.len() + self.y_payload.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, BitstreamError> {
        let zl = u32::try_from(self.z_payload.len()).map_err(|_| BitstreamError::PayloadTooLarge(self.z_payload.len()))?;
        let yl = u32::try_from(self.y_payload.len()).map_err(|_| BitstreamError::PayloadTooLarge(self.y_payload.len()))?;
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(h.quality);
        for v in [h.height, h.width, h.channels_m, h.channels_hyper] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&zl.to_be_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&yl.to_be_bytes());
        out.extend_from_slice(&self.y_payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BitstreamError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        let header = Header {
            quality: r.u8()?,
            height: r.u16()?,
            width: r.u16()?,
            channels_m: r.u16()?,
            channels_hyper: r.u16()?,
        };
        let zl = r.u32()? as usize;
        let z_payload = r.take(zl)?.to_vec();
        let yl = r.u32()? as usize;
        let y_payload = r.take(yl)?.to_vec();
        if r.pos != bytes.len() {
            return Err(BitstreamError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { header, z_payload, y_payload })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BitstreamError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(BitstreamError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BitstreamError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BitstreamError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, BitstreamError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}
