//! Story latent diffusion: a synthetic referenced-story corpus, a latent
//! codec, a memory-conditioned denoiser, autoregressive sampling and the
//! consistency evaluation suite.

pub mod attention;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalsuite;
pub mod image;
pub mod latentcodec;
pub mod pipeline;
pub mod synthstory;
pub mod textenc;

pub use error::{Error, Result};

/// Lower-case hex encoding, used for content hashes.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
