//! Compression pipeline: latents to `.plc` bytes and back.
//!
//! The hyper-latent is coded first with the factorized tables. Its rounded value gives
//! the context from which each latent group's tables are predicted in order, so the
//! decoder can rebuild exactly the tables the encoder used.

pub mod backend;
pub mod container;
pub mod range;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use backend::{
    decode_value, encode_value, EntropyBackend, RangeBackend, Registry, SymbolDecoder,
    SymbolEncoder, RANS_CODER_ID, REFERENCE_CODER_ID,
};
pub use container::{CompressedObject, Header};
pub use range::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};

use crate::entropy_model::{table::CdfTable, EscapeTable, RateReport};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::model::{round_symbol, Model};
use crate::ops;
use crate::refinement::{refine_latents, LatentState, Objective, RefineConfig, RefineOutcome};

/// Refinement settings for [`compress`]; `objective.model` must be the compressing model.
#[derive(Clone, Copy)]
pub struct RefineOptions<'a> {
    pub objective: Objective<'a>,
    pub config: &'a RefineConfig,
    pub seed: u64,
}

#[derive(Clone)]
pub struct CompressOptions<'a> {
    pub coder_id: u8,
    pub registry: Registry,
    pub refine: Option<RefineOptions<'a>>,
}

impl Default for CompressOptions<'_> {
    fn default() -> Self {
        Self {
            coder_id: REFERENCE_CODER_ID,
            registry: Registry::default(),
            refine: None,
        }
    }
}

/// The integer symbols that travel through the coder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSymbols {
    pub hyper: Vec<i32>,
    pub groups: Vec<Vec<i32>>,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub object: CompressedObject,
    pub rate: RateReport,
    pub symbols: LatentSymbols,
    /// Digest of every table used, in coding order.
    pub table_digest: [u8; 32],
    /// What the decoder will reconstruct.
    pub reconstruction: ImageTensor,
    pub refinement: Option<RefineOutcome>,
}

#[derive(Debug, Clone)]
pub struct Decompressed {
    pub image: ImageTensor,
    pub symbols: LatentSymbols,
    pub table_digest: [u8; 32],
}

fn hash_table(h: &mut Sha256, t: &CdfTable) {
    for v in t.to_flat() {
        h.update(v.to_le_bytes());
    }
}

pub fn compress(
    image: &ImageTensor,
    model: &Model,
    options: &CompressOptions,
) -> Result<Compressed> {
    let backend = options.registry.get(options.coder_id)?;
    let padded = image.pad_to_multiple(model.padding_multiple())?;
    let x = padded.batch()?;

    let (state, refinement) = match &options.refine {
        Some(r) => {
            if !std::ptr::eq(r.objective.model, model) {
                return Err(Error::invalid(
                    "refinement objective uses a different model",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let outcome = refine_latents(&x, &r.objective, r.config, &mut rng)?;
            (outcome.state.clone(), Some(outcome))
        }
        None => (LatentState::initial(model, &x)?, None),
    };
    let delta16: Vec<f16> = state
        .stored_delta()
        .into_iter()
        .map(f16::from_f64)
        .collect();
    let delta: Vec<f64> = delta16.iter().map(|d| d.to_f64()).collect();

    let mut digest = Sha256::new();
    let (_, cz, zh, zw) = state.z.dims4()?;
    let hyper_tables = model.entropy().hyper().tables()?;
    let z_symbols: Vec<i32> = ops::to_vec(&state.z)?
        .into_iter()
        .map(round_symbol)
        .collect();
    let mut enc = backend.encoder();
    let mut hyper_bits = 0.0;
    for (i, &s) in z_symbols.iter().enumerate() {
        let t = &hyper_tables[(i / (zh * zw)) % cz];
        hyper_bits += t.value_codelength(s);
        encode_value(enc.as_mut(), t, s)?;
    }
    for t in &hyper_tables {
        hash_table(&mut digest, t);
    }
    let hyper_payload = enc.finish()?;
    let z_hat = ops::from_vec(
        z_symbols.iter().map(|&s| s as f64).collect(),
        state.z.dims(),
    )?;
    let ctx = model.context(&z_hat)?;

    let groups = model.entropy().groups().split(&state.y)?;
    let values: Vec<Vec<f64>> = groups.iter().map(ops::to_vec).collect::<Result<_>>()?;
    let (_, _, h, w) = state.y.dims4()?;
    let plane = h * w;
    let mut group_payloads = Vec::with_capacity(groups.len());
    let mut group_symbols = Vec::with_capacity(groups.len());
    let mut group_bits = Vec::with_capacity(groups.len());
    let y_hat = model.group_loop(&ctx, &delta, |t| {
        let c = t.channels.len();
        let vals = &values[t.group];
        let mut enc = backend.encoder();
        let mut symbols = Vec::with_capacity(vals.len());
        let mut bits = 0.0;
        for (i, v) in vals.iter().enumerate() {
            let d = delta[t.channels.start + (i / plane) % c];
            let s = round_symbol(v / d - t.means[i]);
            let table = t.table(i)?;
            hash_table(&mut digest, &table);
            bits += table.value_codelength(s);
            encode_value(enc.as_mut(), &table, s)?;
            symbols.push(s);
        }
        group_payloads.push(enc.finish()?);
        group_symbols.push(symbols.clone());
        group_bits.push(bits);
        Ok(symbols)
    })?;
    let recon = model.transforms().synthesize(&y_hat)?;
    let reconstruction = ImageTensor::from_batch(&recon, 0)?.crop(image.height(), image.width())?;

    let object = CompressedObject::new(
        image.height() as u32,
        image.width() as u32,
        model.fingerprint()?,
        backend.coder_id(),
        delta16,
        hyper_payload,
        group_payloads,
    )?;
    let rate = RateReport::new(group_bits, hyper_bits, padded.pixels());
    rate.check()?;
    Ok(Compressed {
        object,
        rate,
        symbols: LatentSymbols {
            hyper: z_symbols,
            groups: group_symbols,
        },
        table_digest: digest.finalize().into(),
        reconstruction,
        refinement,
    })
}

/// Decodes an object with the model it was produced by.
pub fn decompress(
    obj: &CompressedObject,
    model: &Model,
    registry: &Registry,
) -> Result<Decompressed> {
    let hdr = &obj.header;
    let expected = model.fingerprint()?;
    if hdr.transform_config_hash != expected {
        return Err(Error::ModelMismatch {
            expected,
            found: hdr.transform_config_hash,
        });
    }
    let backend = registry.get(hdr.coder_id)?;
    let spec = model.entropy().groups();
    if hdr.delta.len() != model.latent_channels() || obj.group_payloads.len() != spec.num_groups() {
        return Err(Error::Corrupt(
            "container channel/group counts do not match the model".into(),
        ));
    }
    let delta = hdr.delta_f64();
    let (oh, ow) = (hdr.original_height as usize, hdr.original_width as usize);
    let m = model.padding_multiple();
    let (ph, pw) = (oh.div_ceil(m) * m, ow.div_ceil(m) * m);
    let tcfg = &model.config().transform;
    let (zh, zw) = (ph / tcfg.downsample_factor_z, pw / tcfg.downsample_factor_z);
    let cz = tcfg.hyper_channels;
    let (yh, yw) = (ph / tcfg.downsample_factor_y, pw / tcfg.downsample_factor_y);

    let mut digest = Sha256::new();
    let hyper_tables = model.entropy().hyper().tables()?;
    let mut dec = backend.decoder(&obj.hyper_payload);
    let mut z_symbols = Vec::with_capacity(cz * zh * zw);
    for i in 0..cz * zh * zw {
        z_symbols.push(decode_value(
            dec.as_mut(),
            &hyper_tables[(i / (zh * zw)) % cz],
        )?);
    }
    dec.finish()?;
    for t in &hyper_tables {
        hash_table(&mut digest, t);
    }
    let z_hat = ops::from_vec(
        z_symbols.iter().map(|&s| s as f64).collect(),
        &[1, cz, zh, zw],
    )?;
    let ctx = model.context(&z_hat)?;
    let (_, _, ch, cw) = ctx.dims4()?;
    if (ch, cw) != (yh, yw) {
        return Err(Error::shape("context does not align with the latent grid"));
    }

    let mut group_symbols = Vec::with_capacity(spec.num_groups());
    let y_hat = model.group_loop(&ctx, &delta, |t| {
        let mut dec = backend.decoder(&obj.group_payloads[t.group]);
        let mut symbols = Vec::with_capacity(t.means.len());
        for i in 0..t.means.len() {
            let table = t.table(i)?;
            hash_table(&mut digest, &table);
            symbols.push(decode_value(dec.as_mut(), &table)?);
        }
        dec.finish()?;
        group_symbols.push(symbols.clone());
        Ok(symbols)
    })?;
    let x_hat = model.transforms().synthesize(&y_hat)?;
    let image = ImageTensor::from_batch(&x_hat, 0)?.crop(oh, ow)?;
    Ok(Decompressed {
        image,
        symbols: LatentSymbols {
            hyper: z_symbols,
            groups: group_symbols,
        },
        table_digest: digest.finalize().into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_model::EntropyConfig;
    use crate::model::ModelConfig;
    use crate::transforms::TransformConfig;

    fn toy_model(seed: u64) -> Model {
        Model::new(&ModelConfig {
            transform: TransformConfig {
                latent_channels: 6,
                hyper_channels: 3,
                base_width: 8,
                downsample_factor_y: 4,
                downsample_factor_z: 8,
            },
            entropy: EntropyConfig {
                num_groups: 3,
                predictor_width: 8,
                hyper_filters: vec![3],
            },
            seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_lossless_and_bit_exact() {
        let model = toy_model(1);
        let img = crate::synthetic::image(21, 30, 5).unwrap().image;
        let c = compress(&img, &model, &CompressOptions::default()).unwrap();
        let bytes = c.object.to_bytes();
        let obj = CompressedObject::from_bytes(&bytes).unwrap();
        let d = decompress(&obj, &model, &Registry::default()).unwrap();
        assert_eq!(d.symbols, c.symbols);
        assert_eq!(d.table_digest, c.table_digest);
        assert_eq!((d.image.height(), d.image.width()), (21, 30));
        assert_eq!(
            ops::to_vec(d.image.tensor()).unwrap(),
            ops::to_vec(c.reconstruction.tensor()).unwrap()
        );
        let payload_bits = 8.0 * obj.payload_bytes() as f64;
        let groups = (c.object.group_payloads.len() + 1) as f64;
        assert!(payload_bits >= c.rate.rate_quantized_bits - 8.0 * groups);
        assert!(payload_bits <= c.rate.rate_quantized_bits + 32.0 * groups);
    }

    #[test]
    fn wrong_model_is_rejected_before_decoding() {
        let img = crate::synthetic::image(16, 16, 1).unwrap().image;
        let c = compress(&img, &toy_model(1), &CompressOptions::default()).unwrap();
        let err = decompress(&c.object, &toy_model(2), &Registry::default()).unwrap_err();
        assert!(matches!(err, Error::ModelMismatch { .. }));
    }

    #[test]
    fn rans_request_without_backend() {
        let img = crate::synthetic::image(16, 16, 1).unwrap().image;
        let opts = CompressOptions {
            coder_id: RANS_CODER_ID,
            ..Default::default()
        };
        assert!(matches!(
            compress(&img, &toy_model(1), &opts),
            Err(Error::BackendUnavailable(2))
        ));
    }
}
