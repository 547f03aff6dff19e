//! Shared optimisation loop, training logs and checkpoint cadence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use digitwin_autodiff::{checkpoint, Adam, AdamConfig, Bindings, Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use digitwin_sim::Frame;

use crate::cltt::{cltt_loss, EmbeddingBatch};
use crate::data::{epoch_batches, run_starts, Images};
use crate::error::{io_err, ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            lr: 3e-4,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("train.lr must be positive, train.weight_decay non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_ms: u128,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,steps,wall_ms,seed\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.8},{},{},{}", e.epoch, e.mean_loss, e.steps, e.wall_ms, e.seed);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Where and how checkpoints are written during training.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub kind: String,
    pub config_hash: u64,
}

impl CheckpointSink {
    pub fn save(&self, file: &str, seed: u64, params: &ParamStore<f32>) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let path = self.dir.join(file);
        checkpoint::save(&path, &self.kind, self.config_hash, seed, params)?;
        Ok(path)
    }
}

/// Runs `cfg.epochs` epochs of Adam over batches of run starts. `loss_fn`
/// builds the loss for one batch on a fresh graph.
pub(crate) fn fit<F>(
    params: &mut ParamStore<f32>,
    starts: &[usize],
    n_frames: usize,
    run_len: usize,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
    mut loss_fn: F,
) -> Result<TrainLog>
where
    F: FnMut(&mut Graph<f32>, &Bindings, &[usize]) -> Result<Var>,
{
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        if let Some(s) = sink {
            s.save("final.ckpt", cfg.seed, params)?;
        }
        return Ok(log);
    }
    if starts.len() < cfg.batch_size {
        return Err(ModelError::Config(format!(
            "dataset too small: {} runs of {run_len} consecutive frames for batch size {}",
            starts.len(),
            cfg.batch_size
        )));
    }
    let mut adam = Adam::new(cfg.adam(), params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let batches = epoch_batches(starts, n_frames, run_len, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let loss = loss_fn(&mut g, &p, batch)?;
            let value = g.scalar_value(loss) as f64;
            if !value.is_finite() {
                if let Some(s) = sink {
                    s.save("diagnostic.ckpt", cfg.seed, params)?;
                }
                return Err(ModelError::NonFinite {
                    layer: format!("training loss at epoch {epoch}"),
                });
            }
            total += value;
            let mut grads = g.backward(loss)?;
            params.absorb_grads(&mut grads, &p);
            adam.step(params)?;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: total / batches.len().max(1) as f64,
            steps: batches.len(),
            wall_ms: t0.elapsed().as_millis(),
            seed: cfg.seed,
        });
        if let Some(s) = sink {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                s.save(&format!("epoch{epoch:04}.ckpt"), cfg.seed, params)?;
            }
        }
    }
    params.zero_grads();
    if let Some(s) = sink {
        s.save("final.ckpt", cfg.seed, params)?;
    }
    Ok(log)
}

/// A model trained with the temporal contrastive loss.
pub trait Contrastive {
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    fn image_size(&self) -> usize;
    fn window(&self) -> usize;
    fn temperature(&self) -> f64;
    fn train_config(&self) -> &TrainConfig;
    /// L2-normalised projections `[B, D]` for a batch of images.
    fn project(&self, g: &mut Graph<f32>, p: &Bindings, images: &Images<f32>) -> Result<Var>;

    /// The training objective on a batch of projections; every model uses
    /// the same temporal contrastive loss.
    fn loss(&self, g: &mut Graph<f32>, batch: &EmbeddingBatch) -> Result<Var> {
        cltt_loss(g, batch, self.temperature())
    }
}

/// Trains on windows of `window` consecutive frames that never cross an
/// episode boundary. Each batch stacks its windows row by row.
pub fn train_contrastive<M: Contrastive>(
    model: &mut M,
    frames: &[Frame],
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    let window = model.window();
    let cfg = model.train_config().clone();
    let size = model.image_size();
    let starts = run_starts(frames, window);
    let mut params = std::mem::take(model.params_mut());
    let model_ref: &M = model;
    let result = fit(&mut params, &starts, frames.len(), window, &cfg, sink, |g, p, batch| {
        let sel: Vec<&Frame> = batch.iter().flat_map(|&s| &frames[s..s + window]).collect();
        let images = Images::from_frames(&sel, size)?;
        let z = model_ref.project(g, p, &images)?;
        model_ref.loss(g, &EmbeddingBatch::windows(z, batch.len(), window))
    });
    *model.params_mut() = params;
    result
}
