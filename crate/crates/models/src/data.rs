//! Frame batches and temporal sampling of windows and clips.

use digitwin_autodiff::{Float, Tensor};
use digitwin_sim::Frame;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ModelError, Result};

/// Square RGB images, channel-last, values scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Images<T> {
    pub count: usize,
    pub size: usize,
    pub data: Vec<T>,
}

pub const CHANNELS: usize = 3;

impl<T: Float> Images<T> {
    pub fn new(count: usize, size: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != count * size * size * CHANNELS {
            return Err(ModelError::Config(format!(
                "{} values cannot hold {count} images of {size}×{size}×3",
                data.len()
            )));
        }
        Ok(Self { count, size, data })
    }

    /// Converts raw RGB bytes (each slice one `size × size × 3` image).
    pub fn from_bytes<'a>(frames: impl IntoIterator<Item = &'a [u8]>, size: usize) -> Result<Self> {
        let scale = T::from_f64(1.0 / 255.0);
        let per = size * size * CHANNELS;
        let mut data = Vec::new();
        let mut count = 0;
        for f in frames {
            if f.len() != per {
                return Err(ModelError::Config(format!(
                    "frame has {} bytes, expected {per} for resolution {size}",
                    f.len()
                )));
            }
            data.extend(f.iter().map(|&b| T::from_f64(b as f64) * scale));
            count += 1;
        }
        Self::new(count, size, data)
    }

    pub fn from_frames(frames: &[&Frame], size: usize) -> Result<Self> {
        Self::from_bytes(frames.iter().map(|f| f.pixels.as_slice()), size)
    }

    pub fn image(&self, i: usize) -> &[T] {
        let per = self.size * self.size * CHANNELS;
        &self.data[i * per..(i + 1) * per]
    }

    /// `[N, C, H, W]` tensor for convolutions.
    pub fn to_nchw(&self) -> Tensor<T> {
        let (n, s) = (self.count, self.size);
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..n {
            let img = self.image(i);
            for y in 0..s {
                for x in 0..s {
                    for c in 0..CHANNELS {
                        out[((i * CHANNELS + c) * s + y) * s + x] = img[(y * s + x) * CHANNELS + c];
                    }
                }
            }
        }
        Tensor::new(vec![n, CHANNELS, s, s], out).expect("sizes agree")
    }
}

/// Non-overlapping square patches: `[N, P, patch·patch·3]`, patches in
/// row-major grid order, each flattened as (row, column, channel).
pub fn patchify<T: Float>(images: &Images<T>, patch: usize, expected_size: usize) -> Result<Tensor<T>> {
    if images.size != expected_size {
        return Err(ModelError::Config(format!(
            "image resolution {} does not match configured {expected_size}",
            images.size
        )));
    }
    if patch == 0 || images.size % patch != 0 {
        return Err(ModelError::Config(format!(
            "patch size {patch} does not divide {}",
            images.size
        )));
    }
    let s = images.size;
    let g = s / patch;
    let dim = patch * patch * CHANNELS;
    let mut out = Vec::with_capacity(images.data.len());
    for i in 0..images.count {
        let img = images.image(i);
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..patch {
                    let row = (gy * patch + py) * s + gx * patch;
                    out.extend_from_slice(&img[row * CHANNELS..(row + patch) * CHANNELS]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.count, g * g, dim], out)?)
}

/// Start indices of every run of `len` consecutive frames that stays
/// inside one episode.
pub fn run_starts(frames: &[Frame], len: usize) -> Vec<usize> {
    if len == 0 || frames.len() < len {
        return Vec::new();
    }
    (0..=frames.len() - len)
        .filter(|&s| {
            frames[s..s + len]
                .windows(2)
                .all(|w| w[1].meta.episode == w[0].meta.episode && w[1].meta.index > w[0].meta.index)
        })
        .collect()
}

/// One epoch of batches: a shuffled subset of run starts, sized so that an
/// epoch touches about as many frames as the dataset holds.
pub fn epoch_batches<R: Rng>(
    starts: &[usize],
    n_frames: usize,
    len: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order = starts.to_vec();
    order.shuffle(rng);
    let take = (n_frames / len.max(1)).clamp(batch.min(order.len()), order.len());
    order.truncate(take);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < batch) {
        out.pop();
    }
    out
}
