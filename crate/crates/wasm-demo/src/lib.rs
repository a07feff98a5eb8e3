//! WebAssembly bindings for the static demo page in `www/`.

use plc::codec::{
    decode_value, encode_value, RangeDecoder, RangeEncoder, SymbolDecoder, SymbolEncoder,
};
use plc::entropy_model::table::gaussian_table;
use plc::entropy_model::EscapeTable;
use plc::metrics::{bd_rate, RdCurve};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const ATANH_CLIP: f64 = 1.0 - 1e-5;

fn err(e: plc::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

/// Soft weight on `ceil(v)` for one SGA draw, given the two Gumbel samples.
fn sga_weight(v: f64, temperature: f64, g_floor: f64, g_ceil: f64) -> f64 {
    let d_floor = (v - v.floor()).clamp(0.0, ATANH_CLIP);
    let d_ceil = (v.ceil() - v).clamp(0.0, ATANH_CLIP);
    let logit_floor = -d_floor.atanh() / temperature;
    let logit_ceil = -d_ceil.atanh() / temperature;
    let diff = ((logit_ceil + g_ceil) - (logit_floor + g_floor)) / temperature;
    1.0 / (1.0 + (-diff).exp())
}

/// `n` stochastically rounded values of `v` at `temperature`.
#[wasm_bindgen]
pub fn sga_samples(v: f64, temperature: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(JsError::new("temperature must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (v.floor(), v.ceil());
    Ok((0..n)
        .map(|_| {
            let g_floor = gumbel(&mut rng);
            let g_ceil = gumbel(&mut rng);
            lo + sga_weight(v, temperature, g_floor, g_ceil) * (hi - lo)
        })
        .collect())
}

/// Table and coding cost of integer symbols under a zero-mean Gaussian of scale `sigma`.
#[wasm_bindgen]
pub struct RateReport {
    offset: i32,
    probabilities: Vec<f64>,
    escape_probability: f64,
    ideal_bits: f64,
    coded_bytes: usize,
    round_trip: bool,
}

#[wasm_bindgen]
impl RateReport {
    /// Symbol value of `probabilities()[0]`.
    #[wasm_bindgen(getter)]
    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.probabilities.clone()
    }

    #[wasm_bindgen(getter, js_name = escapeProbability)]
    pub fn escape_probability(&self) -> f64 {
        self.escape_probability
    }

    /// Sum of table codelengths, escapes included.
    #[wasm_bindgen(getter, js_name = idealBits)]
    pub fn ideal_bits(&self) -> f64 {
        self.ideal_bits
    }

    #[wasm_bindgen(getter, js_name = codedBytes)]
    pub fn coded_bytes(&self) -> usize {
        self.coded_bytes
    }

    #[wasm_bindgen(getter, js_name = roundTrip)]
    pub fn round_trip(&self) -> bool {
        self.round_trip
    }
}

pub fn rate_report(sigma: f64, values: &[i32]) -> plc::Result<RateReport> {
    let table = gaussian_table(sigma)?;
    let n = table.alphabet_size();
    let mut enc: Box<dyn SymbolEncoder> = Box::new(RangeEncoder::new());
    for &v in values {
        encode_value(enc.as_mut(), &table, v)?;
    }
    let payload = enc.finish()?;
    let mut dec: Box<dyn SymbolDecoder> = Box::new(RangeDecoder::new(&payload));
    let mut decoded = Vec::with_capacity(values.len());
    for _ in values {
        decoded.push(decode_value(dec.as_mut(), &table)?);
    }
    let round_trip = dec.finish().is_ok() && decoded == values;
    Ok(RateReport {
        offset: table.window().0,
        probabilities: (0..n - 1).map(|i| table.probability(i)).collect(),
        escape_probability: table.probability(n - 1),
        ideal_bits: values.iter().map(|&v| table.value_codelength(v)).sum(),
        coded_bytes: payload.len(),
        round_trip,
    })
}

/// Range-codes `values` with the Gaussian table for `sigma`.
#[wasm_bindgen(js_name = gaussianRate)]
pub fn gaussian_rate(sigma: f64, values: Vec<i32>) -> Result<RateReport, JsError> {
    rate_report(sigma, &values).map_err(err)
}

pub fn bd_rate_text(
    reference: &str,
    candidate: &str,
    lower_is_better: bool,
) -> plc::Result<String> {
    let a = RdCurve::parse_csv(reference, !lower_is_better)?;
    let b = RdCurve::parse_csv(candidate, !lower_is_better)?;
    let bd = bd_rate(&a, &b)?;
    let percent = if bd.percent.abs() < 0.005 {
        0.0
    } else {
        bd.percent
    };
    Ok(format!("{percent:.2}% ({} fit)", bd.variant))
}

/// BD-rate of two `bpp,quality` CSV texts.
#[wasm_bindgen(js_name = bdRate)]
pub fn bd_rate_js(
    reference: &str,
    candidate: &str,
    lower_is_better: bool,
) -> Result<String, JsError> {
    bd_rate_text(reference, candidate, lower_is_better).map_err(err)
}
