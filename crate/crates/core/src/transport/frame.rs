//! Wire framing for socket transports.
//!
//! ```text
//! offset  size  field
//!      0     8  payload length, little-endian u64
//!      8     4  tag, little-endian u32
//!     12     4  source rank, little-endian u32
//!     16     n  payload
//! ```

use std::io::{self, Read, Write};

use super::{Rank, Tag};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 16;

/// Largest payload a reader accepts; guards against garbage lengths.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub len: u64,
    pub tag: Tag,
    pub source: Rank,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..8].copy_from_slice(&self.len.to_le_bytes());
        out[8..12].copy_from_slice(&self.tag.0.to_le_bytes());
        out[12..16].copy_from_slice(&self.source.0.to_le_bytes());
        out
    }

    pub fn decode(raw: &[u8; HEADER_LEN]) -> Result<Self> {
        let len = u64::from_le_bytes(raw[0..8].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(Error::Frame("payload length exceeds limit"));
        }
        Ok(FrameHeader {
            len,
            tag: Tag(u32::from_le_bytes(raw[8..12].try_into().unwrap())),
            source: Rank(u32::from_le_bytes(raw[12..16].try_into().unwrap())),
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, source: Rank, tag: Tag, payload: &[u8]) -> io::Result<()> {
    let header = FrameHeader {
        len: payload.len() as u64,
        tag,
        source,
    };
    w.write_all(&header.encode())?;
    w.write_all(payload)
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(FrameHeader, Vec<u8>)>> {
    let mut raw = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut raw[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Frame("stream ended inside a header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = FrameHeader::decode(&raw)?;
    let mut payload = vec![0u8; header.len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some((header, payload)))
}
