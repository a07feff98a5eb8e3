//! 32-bit range coder over 16-bit frequency tables.
//!
//! Carry propagation follows the LZMA scheme (a cached byte plus a run of pending
//! `0xFF`s). The always-zero first byte is not emitted and the final interval is
//! closed with four bytes, so a stream is `4 + shifts` bytes long.
//!
//! The decoder re-encodes everything it decodes; [`RangeDecoder::finish`] compares
//! that shadow stream with the payload, so truncation and corruption surface as an
//! error rather than silently wrong symbols.

use crate::entropy_model::table::{CdfTable, PRECISION_BITS, TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    skipped_first: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            skipped_first: false,
        }
    }

    fn push(&mut self, byte: u8) {
        if self.skipped_first {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.skipped_first = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows the interval to `[start, start + freq)` out of `2^16`.
    pub fn encode_range(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, table: &CdfTable, index: usize) -> Result<()> {
        if index >= table.alphabet_size() {
            return Err(Error::invalid(format!(
                "symbol {index} outside alphabet of {}",
                table.alphabet_size()
            )));
        }
        self.encode_range(table.start(index), table.frequency(index));
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        let high = self.low + u64::from(self.range) - 1;
        for k in (0..=32).rev() {
            let v = high & !((1u64 << k) - 1);
            if v >= self.low {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    shadow: RangeEncoder,
    failed: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
            shadow: RangeEncoder::new(),
            failed: false,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        if self.failed {
            return Err(Error::Corrupt("range decoder already failed".into()));
        }
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            self.failed = true;
            return Err(Error::Corrupt("range code outside the table".into()));
        }
        let index = table.find(target);
        let (start, freq) = (table.start(index), table.frequency(index));
        self.code -= r * start;
        self.range = r * freq;
        if self.code >= self.range {
            self.failed = true;
            return Err(Error::Corrupt(
                "range code outside the symbol interval".into(),
            ));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
        self.shadow.encode_range(start, freq);
        Ok(index)
    }

    /// Errors unless the payload is exactly what the encoder emits for the decoded symbols.
    pub fn finish(self) -> Result<()> {
        if self.failed {
            return Err(Error::Corrupt("range decoder failed".into()));
        }
        if self.shadow.finish() != self.input {
            return Err(Error::Corrupt(
                "payload does not match its decoded symbols (truncated or altered)".into(),
            ));
        }
        Ok(())
    }
}

/// Encodes table indices with the range coder.
pub fn encode_symbols(symbols: &[usize], table: &CdfTable) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(table, s)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` table indices and verifies the payload.
pub fn decode_symbols(payload: &[u8], table: &CdfTable, count: usize) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(payload);
    let out = (0..count)
        .map(|_| dec.decode(table))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
