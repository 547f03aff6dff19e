//! Unsupervised two-alternative forced choice: a fully connected decoder is
//! trained to reconstruct the imprinted-object frames from frozen features,
//! then each trial shows one imprinted and one novel image and the model
//! "chooses" the image it reconstructs better.

use digitwin_autodiff::{Adam, AdamConfig, Graph, Init, ParamStore, Tensor};
use digitwin_models::nn::Linear;
use digitwin_models::{encode_frames, Encoder, Images};
use digitwin_sim::{EpisodeDataset, Frame, ObjectId, NUM_VIEWPOINTS};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::features::ENCODE_CHUNK;
use crate::stats::{chi_square_test, ChiSquare};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Imprint frames used to fit the decoder, evenly spaced over the dataset.
    pub max_images: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            max_images: 2000,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.max_images == 0 {
            return Err(EvalError::Config(
                "decoder hidden, batch_size and max_images must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(EvalError::Config("decoder lr must be positive".into()));
        }
        Ok(())
    }
}

/// Feature → hidden (ReLU) → flattened pixels, on standardised features.
#[derive(Clone, Debug)]
pub struct FcDecoder {
    params: ParamStore<f32>,
    fc1: Linear,
    fc2: Linear,
    feature_mean: Vec<f32>,
    feature_scale: Vec<f32>,
    image_size: usize,
    steps: u64,
    epoch_losses: Vec<f64>,
}

impl FcDecoder {
    pub fn new(feature_dim: usize, image_size: usize, cfg: &DecoderConfig) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let fc1 = Linear::new(&mut params, &mut init, "decoder.fc1", feature_dim, cfg.hidden);
        let fc2 = Linear::new(&mut params, &mut init, "decoder.fc2", cfg.hidden, image_size * image_size * 3);
        Self {
            params,
            fc1,
            fc2,
            feature_mean: vec![0.0; feature_dim],
            feature_scale: vec![1.0; feature_dim],
            image_size,
            steps: 0,
            epoch_losses: Vec::new(),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.steps > 0
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn feature_dim(&self) -> usize {
        self.fc1.d_in
    }

    pub fn pixels(&self) -> usize {
        self.fc2.d_out
    }

    fn standardise(&self, features: &[f32]) -> Vec<f32> {
        let d = self.feature_dim();
        features
            .chunks(d)
            .flat_map(|r| {
                r.iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_scale)
                    .map(|((&x, m), s)| (x - m) * s)
            })
            .collect()
    }

    /// Fits the decoder by mean squared error. `features` is `[n, d]`,
    /// `targets` is `[n, pixels]` with values in [0, 1].
    pub fn fit(&mut self, features: &[f32], targets: &[f32], cfg: &DecoderConfig) -> Result<()> {
        cfg.validate()?;
        let d = self.feature_dim();
        let px = self.pixels();
        let n = features.len() / d;
        if n == 0 || features.len() != n * d || targets.len() != n * px {
            return Err(EvalError::Config(format!(
                "{} feature values and {} target values do not form rows of {d} and {px}",
                features.len(),
                targets.len()
            )));
        }
        for j in 0..d {
            let col = features.iter().skip(j).step_by(d);
            let m = col.clone().map(|&x| x as f64).sum::<f64>() / n as f64;
            let v = col.map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n as f64;
            self.feature_mean[j] = m as f32;
            self.feature_scale[j] = if v > 1e-12 { (1.0 / v.sqrt()) as f32 } else { 0.0 };
        }
        let x = self.standardise(features);
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &self.params,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2afc);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let xb: Vec<f32> = chunk.iter().flat_map(|&i| &x[i * d..(i + 1) * d]).copied().collect();
                let yb: Vec<f32> = chunk
                    .iter()
                    .flat_map(|&i| &targets[i * px..(i + 1) * px])
                    .copied()
                    .collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g);
                let xv = g.leaf(&Tensor::new(vec![chunk.len(), d], xb)?);
                let yv = g.leaf(&Tensor::new(vec![chunk.len(), px], yb)?);
                let h = self.fc1.forward(&mut g, &p, xv)?;
                let h = g.relu(h);
                let out = self.fc2.forward(&mut g, &p, h)?;
                let loss = g.mse(out, yv)?;
                total += g.scalar_value(loss) as f64;
                batches += 1;
                let mut grads = g.backward(loss)?;
                self.params.absorb_grads(&mut grads, &p);
                adam.step(&mut self.params)?;
                self.steps += 1;
            }
            self.epoch_losses.push(total / batches.max(1) as f64);
        }
        self.params.zero_grads();
        Ok(())
    }

    /// Reconstructed pixels `[n, pixels]`.
    pub fn reconstruct(&self, features: &[f32]) -> Result<Vec<f32>> {
        if !self.is_trained() {
            return Err(EvalError::Contract("the decoder has not been trained".into()));
        }
        let d = self.feature_dim();
        let n = features.len() / d;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.leaf(&Tensor::new(vec![n, d], self.standardise(features))?);
        let h = self.fc1.forward(&mut g, &p, xv)?;
        let h = g.relu(h);
        let out = self.fc2.forward(&mut g, &p, h)?;
        Ok(g.tensor(out).into_data())
    }

    /// Per-image mean squared reconstruction error through encoder and decoder.
    pub fn errors(&self, encoder: &dyn Encoder, frames: &[&Frame]) -> Result<Vec<f64>> {
        if !self.is_trained() {
            return Err(EvalError::Contract("the decoder has not been trained".into()));
        }
        if encoder.feature_dim() != self.feature_dim() || encoder.image_size() != self.image_size {
            return Err(EvalError::Config("decoder does not match the encoder".into()));
        }
        frames
            .par_chunks(ENCODE_CHUNK)
            .map(|chunk| {
                let images = Images::<f32>::from_frames(chunk, self.image_size)?;
                let feats = encoder.features(&images)?;
                let recon = self.reconstruct(&feats)?;
                let px = self.pixels();
                Ok((0..chunk.len())
                    .map(|i| {
                        let (a, b) = (&recon[i * px..(i + 1) * px], images.image(i));
                        a.iter().zip(b).map(|(&r, &t)| ((r - t) as f64).powi(2)).sum::<f64>() / px as f64
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.concat())
    }
}

/// Fits a decoder on frozen features of the imprint-condition frames.
pub fn train_decoder(encoder: &dyn Encoder, imprint: &[Frame], cfg: &DecoderConfig) -> Result<FcDecoder> {
    cfg.validate()?;
    if imprint.is_empty() {
        return Err(EvalError::Config("no imprint frames to train the decoder".into()));
    }
    let take = cfg.max_images.min(imprint.len());
    let frames: Vec<&Frame> = (0..take).map(|k| &imprint[k * imprint.len() / take]).collect();
    let bytes: Vec<&[u8]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    let features = encode_frames(encoder, &bytes, ENCODE_CHUNK)?;
    let size = encoder.image_size();
    let targets = Images::<f32>::from_frames(&frames, size)?.data;
    let mut decoder = FcDecoder::new(encoder.feature_dim(), size, cfg);
    decoder.fit(&features, &targets, cfg)?;
    Ok(decoder)
}

/// Credit for one trial: 1 if the imprinted image is reconstructed better,
/// 0 if worse, 0.5 on an exact tie.
pub fn score_trial(imprinted_error: f64, novel_error: f64) -> f64 {
    if imprinted_error < novel_error {
        1.0
    } else if imprinted_error > novel_error {
        0.0
    } else {
        0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoAfcConfig {
    pub trials_per_viewpoint: usize,
    pub seed: u64,
}

impl Default for TwoAfcConfig {
    fn default() -> Self {
        Self {
            trials_per_viewpoint: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub viewpoint: u8,
    /// Index of the paired frames within their probe subsets.
    pub frame: usize,
    pub imprinted_error: f64,
    pub novel_error: f64,
    pub credit: f64,
}

impl Trial {
    pub fn correct(&self) -> bool {
        self.credit == 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcReport {
    pub imprinted: ObjectId,
    pub trials: Vec<Trial>,
    pub accuracy: f64,
    /// Total credit rounded to the nearest whole trial, for the test below.
    pub successes: u64,
    pub chi_square: ChiSquare,
}

impl TwoAfcReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("viewpoint,frame,imprinted_error,novel_error,credit\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{:.9},{:.9},{}\n",
                t.viewpoint, t.frame, t.imprinted_error, t.novel_error, t.credit
            ));
        }
        out
    }
}

fn subset(probes: &[EpisodeDataset], object: ObjectId, viewpoint: u8) -> Result<&EpisodeDataset> {
    probes
        .iter()
        .find(|s| {
            s.frames
                .first()
                .is_some_and(|f| f.meta.object == Some(object) && f.meta.viewpoint == viewpoint)
        })
        .ok_or_else(|| EvalError::Config(format!("no probe subset for object {object:?}, viewpoint {viewpoint}")))
}

/// Pairs, for every viewpoint range, sampled imprinted-object frames with
/// the novel-object frame rendered from the same agent pose, and scores
/// each pair by reconstruction error.
pub fn two_afc_eval(
    encoder: &dyn Encoder,
    decoder: &FcDecoder,
    imprinted: ObjectId,
    probes: &[EpisodeDataset],
    cfg: &TwoAfcConfig,
) -> Result<TwoAfcReport> {
    if !decoder.is_trained() {
        return Err(EvalError::Contract("the decoder has not been trained".into()));
    }
    if cfg.trials_per_viewpoint == 0 {
        return Err(EvalError::Config("trials_per_viewpoint must be positive".into()));
    }
    let mut pairs = Vec::new();
    for v in 0..NUM_VIEWPOINTS as u8 {
        let a = subset(probes, imprinted, v)?;
        let b = subset(probes, imprinted.other(), v)?;
        let n = a.frames.len().min(b.frames.len());
        if n < cfg.trials_per_viewpoint {
            return Err(EvalError::Config(format!(
                "viewpoint {v} has {n} paired frames, fewer than {} trials",
                cfg.trials_per_viewpoint
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ v as u64);
        let mut picks = index::sample(&mut rng, n, cfg.trials_per_viewpoint).into_vec();
        picks.sort_unstable();
        for i in picks {
            pairs.push((v, i, &a.frames[i], &b.frames[i]));
        }
    }
    let imprinted_frames: Vec<&Frame> = pairs.iter().map(|p| p.2).collect();
    let novel_frames: Vec<&Frame> = pairs.iter().map(|p| p.3).collect();
    let ea = decoder.errors(encoder, &imprinted_frames)?;
    let eb = decoder.errors(encoder, &novel_frames)?;
    let trials: Vec<Trial> = pairs
        .iter()
        .zip(ea.iter().zip(&eb))
        .map(|(&(viewpoint, frame, _, _), (&a, &b))| Trial {
            viewpoint,
            frame,
            imprinted_error: a,
            novel_error: b,
            credit: score_trial(a, b),
        })
        .collect();
    let credit: f64 = trials.iter().map(|t| t.credit).sum();
    let successes = credit.round() as u64;
    Ok(TwoAfcReport {
        imprinted,
        accuracy: credit / trials.len() as f64,
        successes,
        chi_square: chi_square_test(successes, trials.len() as u64, 0.5)?,
        trials,
    })
}
