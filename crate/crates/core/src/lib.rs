//! Neural-codec resynthesis lab.
//!
//! Audio is framed by an orthonormal DCT, quantized with residual vector
//! quantization, and rebuilt from the first-layer codes alone by one of three
//! strategies: coarse-to-fine code prediction, one-step regression to the
//! pre-quantized embedding, or backward sampling along a paired-data
//! Schrödinger bridge.

mod binio;
pub mod bridge;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod resynth;
pub mod rvq;
pub mod transform;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
