//! Entropy-coder backends selectable through the container's `coder_id`.
//!
//! A backend only has to honour the [`CdfTable`] contract: any table with strictly
//! increasing cumulative counts ending at `2^16`. Payload bytes are backend-specific.

use std::sync::Arc;

use super::range::{RangeDecoder, RangeEncoder};
use crate::entropy_model::table::{elias_gamma_bits, CdfTable, Coded, EscapeTable};
use crate::error::{Error, Result};

/// `coder_id` of the built-in range coder.
pub const REFERENCE_CODER_ID: u8 = 1;
/// `coder_id` reserved for the rANS backend.
pub const RANS_CODER_ID: u8 = 2;

pub trait SymbolEncoder {
    fn encode(&mut self, table: &CdfTable, index: usize) -> Result<()>;
    fn finish(self: Box<Self>) -> Result<Vec<u8>>;
}

pub trait SymbolDecoder {
    fn decode(&mut self, table: &CdfTable) -> Result<usize>;
    /// Validates that the payload was consumed consistently.
    fn finish(self: Box<Self>) -> Result<()>;
}

pub trait EntropyBackend: Send + Sync {
    fn coder_id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn encoder(&self) -> Box<dyn SymbolEncoder>;
    fn decoder<'a>(&self, payload: &'a [u8]) -> Box<dyn SymbolDecoder + 'a>;
}

impl SymbolEncoder for RangeEncoder {
    fn encode(&mut self, table: &CdfTable, index: usize) -> Result<()> {
        RangeEncoder::encode(self, table, index)
    }

    fn finish(self: Box<Self>) -> Result<Vec<u8>> {
        Ok(RangeEncoder::finish(*self))
    }
}

impl SymbolDecoder for RangeDecoder<'_> {
    fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        RangeDecoder::decode(self, table)
    }

    fn finish(self: Box<Self>) -> Result<()> {
        RangeDecoder::finish(*self)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RangeBackend;

impl EntropyBackend for RangeBackend {
    fn coder_id(&self) -> u8 {
        REFERENCE_CODER_ID
    }

    fn name(&self) -> &'static str {
        "range"
    }

    fn encoder(&self) -> Box<dyn SymbolEncoder> {
        Box::new(RangeEncoder::new())
    }

    fn decoder<'a>(&self, payload: &'a [u8]) -> Box<dyn SymbolDecoder + 'a> {
        Box::new(RangeDecoder::new(payload))
    }
}

/// Backends available to this process, looked up by `coder_id`.
#[derive(Clone)]
pub struct Registry {
    backends: Vec<Arc<dyn EntropyBackend>>,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            backends: vec![Arc::new(RangeBackend)],
        }
    }
}

impl Registry {
    /// Adds or replaces the backend for its `coder_id`.
    pub fn register(&mut self, backend: Arc<dyn EntropyBackend>) {
        self.backends.retain(|b| b.coder_id() != backend.coder_id());
        self.backends.push(backend);
    }

    pub fn get(&self, coder_id: u8) -> Result<Arc<dyn EntropyBackend>> {
        if let Some(b) = self.backends.iter().find(|b| b.coder_id() == coder_id) {
            return Ok(b.clone());
        }
        match coder_id {
            RANS_CODER_ID => Err(Error::BackendUnavailable(coder_id)),
            _ => Err(Error::Corrupt(format!("unknown coder id {coder_id}"))),
        }
    }

    pub fn ids(&self) -> Vec<u8> {
        self.backends.iter().map(|b| b.coder_id()).collect()
    }
}

/// Codes an integer through an escape-terminated table.
///
/// Values outside the table window are sent as the escape symbol, the Elias-gamma
/// code of the overshoot and a sign bit, all as fair binary decisions.
pub fn encode_value(enc: &mut dyn SymbolEncoder, table: &CdfTable, value: i32) -> Result<()> {
    match table.classify(value) {
        Coded::Index(i) => enc.encode(table, i),
        Coded::Escape { excess, negative } => {
            enc.encode(table, table.escape_index())?;
            let bit = CdfTable::binary();
            for b in elias_gamma_bits(excess) {
                enc.encode(&bit, usize::from(b))?;
            }
            enc.encode(&bit, usize::from(negative))
        }
    }
}

pub fn decode_value(dec: &mut dyn SymbolDecoder, table: &CdfTable) -> Result<i32> {
    let index = dec.decode(table)?;
    if index != table.escape_index() {
        return Ok(table.value_of(index));
    }
    let bit = CdfTable::binary();
    let mut zeros = 0u32;
    while dec.decode(&bit)? == 0 {
        zeros += 1;
        if zeros > 31 {
            return Err(Error::Corrupt("escape length overflow".into()));
        }
    }
    let mut excess: u64 = 1;
    for _ in 0..zeros {
        excess = (excess << 1) | dec.decode(&bit)? as u64;
    }
    let negative = dec.decode(&bit)? == 1;
    let (lo, hi) = table.window();
    let v = if negative {
        i64::from(lo) - excess as i64
    } else {
        i64::from(hi) + excess as i64
    };
    i32::try_from(v).map_err(|_| Error::Corrupt("escaped value out of range".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::table::gaussian_table;

    #[test]
    fn values_round_trip_through_escapes() {
        let t = gaussian_table(0.7).unwrap();
        let values = [0, 1, -1, 5, -5, 6, -6, 100, -100, 70_000, -1_000_000, 3];
        let b = RangeBackend;
        let mut enc = b.encoder();
        for &v in &values {
            encode_value(enc.as_mut(), &t, v).unwrap();
        }
        let payload = enc.finish().unwrap();
        let mut dec = b.decoder(&payload);
        for &v in &values {
            assert_eq!(decode_value(dec.as_mut(), &t).unwrap(), v);
        }
        dec.finish().unwrap();
        let bits: f64 = values.iter().map(|&v| t.value_codelength(v)).sum();
        assert!(8.0 * payload.len() as f64 <= bits + 32.0);
    }

    #[test]
    fn registry_reports_missing_rans() {
        let r = Registry::default();
        assert!(r.get(1).is_ok());
        assert!(matches!(r.get(2), Err(Error::BackendUnavailable(2))));
        assert!(matches!(r.get(9), Err(Error::Corrupt(_))));
    }
}
