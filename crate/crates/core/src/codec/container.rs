//! The `.plc` container.
//!
//! All integers are little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `PLC1` |
//! | 4 | 2 | format version (`u16`) |
//! | 6 | 4 | original height (`u32`) |
//! | 10 | 4 | original width (`u32`) |
//! | 14 | 8 | transform/model hash (`u64`) |
//! | 22 | 1 | coder id (`u8`) |
//! | 23 | 2 | latent channels `C` (`u16`) |
//! | 25 | 1 | group count `G` (`u8`) |
//! | 26 | 4 | CRC-32 of all payload bytes in order (`u32`) |
//! | 30 | 2C | per-channel quantization steps (IEEE half floats) |
//! | 30 + 2C | 4(G+1) | payload lengths (`u32`), hyper-latent first |
//! | 34 + 2C + 4G | ... | hyper-latent payload, then group payloads in order |

use half::f16;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PLC1";
pub const FORMAT_VERSION: u16 = 1;
pub const FIXED_HEADER_BYTES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub format_version: u16,
    pub original_height: u32,
    pub original_width: u32,
    pub transform_config_hash: u64,
    pub coder_id: u8,
    /// Quantization steps exactly as stored.
    pub delta: Vec<f16>,
    pub checksum: u32,
}

impl Header {
    pub fn delta_f64(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d.to_f64()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedObject {
    pub header: Header,
    pub hyper_payload: Vec<u8>,
    pub group_payloads: Vec<Vec<u8>>,
}

fn checksum(hyper: &[u8], groups: &[Vec<u8>]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(hyper);
    for g in groups {
        h.update(g);
    }
    h.finalize()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl CompressedObject {
    /// Assembles an object, filling in version and checksum.
    pub fn new(
        original_height: u32,
        original_width: u32,
        transform_config_hash: u64,
        coder_id: u8,
        delta: Vec<f16>,
        hyper_payload: Vec<u8>,
        group_payloads: Vec<Vec<u8>>,
    ) -> Result<Self> {
        if delta.len() > u16::MAX as usize || group_payloads.len() > u8::MAX as usize {
            return Err(Error::invalid(
                "too many channels or groups for the container",
            ));
        }
        Ok(Self {
            header: Header {
                format_version: FORMAT_VERSION,
                original_height,
                original_width,
                transform_config_hash,
                coder_id,
                checksum: checksum(&hyper_payload, &group_payloads),
                delta,
            },
            hyper_payload,
            group_payloads,
        })
    }

    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER_BYTES + 2 * self.header.delta.len() + 4 * (self.group_payloads.len() + 1)
    }

    pub fn payload_bytes(&self) -> usize {
        self.hyper_payload.len() + self.group_payloads.iter().map(Vec::len).sum::<usize>()
    }

    pub fn total_bytes(&self) -> usize {
        self.header_bytes() + self.payload_bytes()
    }

    /// `8 * total_bytes / (original_height * original_width)`.
    pub fn bpp(&self) -> f64 {
        let pixels = self.header.original_height as f64 * self.header.original_width as f64;
        8.0 * self.total_bytes() as f64 / pixels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&h.format_version.to_le_bytes());
        out.extend_from_slice(&h.original_height.to_le_bytes());
        out.extend_from_slice(&h.original_width.to_le_bytes());
        out.extend_from_slice(&h.transform_config_hash.to_le_bytes());
        out.push(h.coder_id);
        out.extend_from_slice(&(h.delta.len() as u16).to_le_bytes());
        out.push(self.group_payloads.len() as u8);
        out.extend_from_slice(&h.checksum.to_le_bytes());
        for d in &h.delta {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.hyper_payload.len() as u32).to_le_bytes());
        for g in &self.group_payloads {
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.hyper_payload);
        for g in &self.group_payloads {
            out.extend_from_slice(g);
        }
        out
    }

    /// Parses and checksums a container. Structural damage is [`Error::Corrupt`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a .plc container (bad magic)".into()));
        }
        let format_version = r.u16()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported format version {format_version}"
            )));
        }
        let original_height = r.u32()?;
        let original_width = r.u32()?;
        if original_height == 0 || original_width == 0 {
            return Err(Error::Corrupt("zero image dimension".into()));
        }
        let transform_config_hash = r.u64()?;
        let coder_id = r.u8()?;
        let channels = r.u16()? as usize;
        let groups = r.u8()? as usize;
        let checksum_stored = r.u32()?;
        let delta = (0..channels)
            .map(|_| r.u16().map(f16::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if delta.iter().any(|d| !(d.to_f64() > 0.0) || !d.is_finite()) {
            return Err(Error::Corrupt("non-positive quantization step".into()));
        }
        let hyper_len = r.u32()? as usize;
        let group_lens = (0..groups)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let hyper_payload = r.take(hyper_len)?.to_vec();
        let group_payloads = group_lens
            .iter()
            .map(|&n| r.take(n).map(<[u8]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the last payload",
                bytes.len() - r.pos
            )));
        }
        if checksum(&hyper_payload, &group_payloads) != checksum_stored {
            return Err(Error::Corrupt("payload checksum mismatch".into()));
        }
        Ok(Self {
            header: Header {
                format_version,
                original_height,
                original_width,
                transform_config_hash,
                coder_id,
                delta,
                checksum: checksum_stored,
            },
            hyper_payload,
            group_payloads,
        })
    }
}
