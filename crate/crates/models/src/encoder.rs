//! Frozen-encoder feature extraction shared by every model family.

use rayon::prelude::*;

use crate::data::Images;
use crate::error::Result;

/// A frozen image encoder exposing the features used by the probes.
pub trait Encoder: Sync {
    fn kind(&self) -> &'static str;
    fn image_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Row-major `[N, feature_dim]` features.
    fn features(&self, images: &Images<f32>) -> Result<Vec<f32>>;
}

/// Features for raw RGB frames, evaluated in fixed-size chunks. Chunks run
/// in parallel; results are concatenated in input order.
pub fn encode_frames(encoder: &dyn Encoder, frames: &[&[u8]], chunk: usize) -> Result<Vec<f32>> {
    let size = encoder.image_size();
    let parts = frames
        .par_chunks(chunk.max(1))
        .map(|c| encoder.features(&Images::from_bytes(c.iter().copied(), size)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}
