//! Probe datasets built from frozen-encoder features.

use digitwin_models::{encode_frames, Encoder};
use digitwin_sim::{EpisodeDataset, Frame};

use crate::error::{EvalError, Result};
use crate::probe::ProbeData;

pub const ENCODE_CHUNK: usize = 64;

/// Encodes every frame of the labelled probe subsets. Label 1 is object A.
pub fn probe_data(encoder: &dyn Encoder, subsets: &[EpisodeDataset]) -> Result<ProbeData> {
    let frames: Vec<&Frame> = subsets.iter().flat_map(|s| &s.frames).collect();
    probe_data_from_frames(encoder, &frames)
}

pub fn probe_data_from_frames(encoder: &dyn Encoder, frames: &[&Frame]) -> Result<ProbeData> {
    let mut labels = Vec::with_capacity(frames.len());
    let mut viewpoints = Vec::with_capacity(frames.len());
    for f in frames {
        let object = f
            .meta
            .object
            .ok_or_else(|| EvalError::Config("probe frame without an object label".into()))?;
        labels.push((object.label() == 0) as u8);
        viewpoints.push(f.meta.viewpoint);
    }
    let pixels: Vec<&[u8]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    let features = encode_frames(encoder, &pixels, ENCODE_CHUNK)?;
    ProbeData::new(encoder.feature_dim(), features, labels, viewpoints)
}
