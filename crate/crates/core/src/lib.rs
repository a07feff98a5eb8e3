#[cfg(feature = "model")]
pub mod checkpoint;
#[cfg(feature = "model")]
pub mod cli;
#[cfg(feature = "model")]
pub mod codec;
#[cfg(feature = "model")]
pub mod discriminator;
#[cfg(feature = "model")]
pub mod entropy_model;
pub mod error;
#[cfg(feature = "model")]
pub mod imaging;
#[cfg(feature = "model")]
pub mod losses;
#[cfg(feature = "model")]
pub mod metrics;
#[cfg(feature = "model")]
pub mod model;
#[cfg(feature = "model")]
pub mod nn;
#[cfg(feature = "model")]
pub mod ops;
#[cfg(feature = "model")]
pub mod refinement;
#[cfg(feature = "model")]
pub mod synthetic;
#[cfg(feature = "model")]
pub mod training;
#[cfg(feature = "model")]
pub mod transforms;

/// Entropy tables only.
#[cfg(not(feature = "model"))]
pub mod entropy_model {
    pub mod table;
    pub use table::{CdfTable, Coded, EscapeTable};
}

/// Range coder, backend registry and container format.
#[cfg(not(feature = "model"))]
pub mod codec {
    pub mod backend;
    pub mod container;
    pub mod range;
    pub use backend::{
        decode_value, encode_value, EntropyBackend, RangeBackend, Registry, SymbolDecoder,
        SymbolEncoder, RANS_CODER_ID, REFERENCE_CODER_ID,
    };
    pub use container::{CompressedObject, Header};
    pub use range::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};
}

/// BD-rate only.
#[cfg(not(feature = "model"))]
pub mod metrics {
    mod bd;
    pub use bd::{bd_rate, BdRate, BdVariant, RdCurve};
}

pub use error::{Error, Result};
