//! Masked video autoencoder with tube masking.
//!
//! A clip of `clip_length` frames is cut into space-time tubes of
//! `tube_frames × patch × patch` pixels. The encoder sees only the visible
//! tubes; the decoder gets the encoded tokens plus a shared mask token at
//! every masked position and regresses the masked tubes' pixels.

use digitwin_autodiff::{Bindings, Float, Graph, Init, ParamId, ParamStore, Tensor, Var};
use digitwin_sim::Frame;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{run_starts, Images, CHANNELS};
use crate::encoder::Encoder;
use crate::error::{ModelError, Result};
use crate::nn::{ensure_finite, run_blocks, Block, BlockShape, LayerNorm, Linear, INIT_STD};
use crate::train::{fit, CheckpointSink, TrainConfig, TrainLog};

pub const KIND: &str = "videomae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub image_size: usize,
    pub clip_length: usize,
    pub patch_size: usize,
    pub tube_frames: usize,
    pub mask_ratio: f64,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_head_dim: usize,
    pub encoder_layers: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_head_dim: usize,
    pub decoder_layers: usize,
    pub mlp_ratio: usize,
    pub train: TrainConfig,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            clip_length: 16,
            patch_size: 8,
            tube_frames: 2,
            mask_ratio: 0.9,
            encoder_width: 128,
            encoder_heads: 3,
            encoder_head_dim: 32,
            encoder_layers: 3,
            decoder_width: 64,
            decoder_heads: 1,
            decoder_head_dim: 64,
            decoder_layers: 1,
            mlp_ratio: 4,
            train: TrainConfig {
                batch_size: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            bad.push("image_size must be a positive multiple of patch_size");
        }
        if self.tube_frames == 0 || self.clip_length % self.tube_frames != 0 || self.clip_length == 0 {
            bad.push("clip_length must be a positive multiple of tube_frames");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            bad.push("mask_ratio must lie strictly between 0 and 1");
        }
        let widths = [
            self.encoder_width,
            self.encoder_heads,
            self.encoder_head_dim,
            self.encoder_layers,
            self.decoder_width,
            self.decoder_heads,
            self.decoder_head_dim,
            self.decoder_layers,
            self.mlp_ratio,
        ];
        if widths.contains(&0) {
            bad.push("widths, head counts and layer counts must be positive");
        }
        if !bad.is_empty() {
            return Err(ModelError::Config(bad.join("; ")));
        }
        if self.masked_count() == 0 || self.masked_count() == self.num_tubes() {
            return Err(ModelError::Config("mask_ratio leaves no masked or no visible tube".into()));
        }
        self.train.validate()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tubes_per_slot(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tubes(&self) -> usize {
        self.clip_length / self.tube_frames * self.tubes_per_slot()
    }

    pub fn tube_dim(&self) -> usize {
        self.tube_frames * self.patch_size * self.patch_size * CHANNELS
    }

    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.num_tubes() as f64).round() as usize
    }
}

/// Visible and masked tube indices of one clip, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedClip {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub seed: u64,
}

/// Uniform selection of `round(ratio × total)` tubes without replacement.
pub fn mask_tubes(total: usize, ratio: f64, seed: u64) -> Result<MaskedClip> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(ModelError::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n_masked = (ratio * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = order[..n_masked].to_vec();
    let mut visible = order[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskedClip { visible, masked, seed })
}

/// Cuts clips (each `clip_length` consecutive images) into tubes:
/// `[clips, num_tubes, tube_dim]`. Tube `slot·g² + gy·g + gx` holds
/// frames `slot·tube_frames ..` at grid cell `(gy, gx)`, flattened as
/// (frame, row, column, channel).
pub fn tubify<T: Float>(images: &Images<T>, cfg: &MaeConfig) -> Result<Tensor<T>> {
    if images.size != cfg.image_size || images.count % cfg.clip_length != 0 {
        return Err(ModelError::Config(format!(
            "{} images of {}px do not form clips of {} frames at {}px",
            images.count, images.size, cfg.clip_length, cfg.image_size
        )));
    }
    let (s, p, g, tf) = (cfg.image_size, cfg.patch_size, cfg.grid(), cfg.tube_frames);
    let clips = images.count / cfg.clip_length;
    let mut out = Vec::with_capacity(images.data.len());
    for c in 0..clips {
        for slot in 0..cfg.clip_length / tf {
            for gy in 0..g {
                for gx in 0..g {
                    for dt in 0..tf {
                        let img = images.image(c * cfg.clip_length + slot * tf + dt);
                        for py in 0..p {
                            let row = (gy * p + py) * s + gx * p;
                            out.extend_from_slice(&img[row * CHANNELS..(row + p) * CHANNELS]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![clips, cfg.num_tubes(), cfg.tube_dim()], out)?)
}

/// Graph handles of one masked reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub loss: Var,
    /// Predicted masked tubes, `[clips · masked, tube_dim]`, clip-major in mask-list order.
    pub predicted: Var,
}

#[derive(Clone, Debug)]
pub struct VideoMae<T: Float> {
    config: MaeConfig,
    params: ParamStore<T>,
    embed: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    enc_to_dec: Linear,
    mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
}

impl<T: Float> VideoMae<T> {
    pub fn new(config: MaeConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Init::new(config.train.seed);
        let (we, wd, n) = (config.encoder_width, config.decoder_width, config.num_tubes());
        let embed = Linear::new(&mut p, &mut init, "tube_embed", config.tube_dim(), we);
        let enc_pos = p.add("encoder.pos_embed", init.trunc_normal(&[n, we], INIT_STD));
        let enc_shape = BlockShape {
            width: we,
            heads: config.encoder_heads,
            head_dim: config.encoder_head_dim,
            mlp_hidden: we * config.mlp_ratio,
        };
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| Block::new(&mut p, &mut init, &format!("encoder.block{i}"), enc_shape))
            .collect();
        let enc_norm = LayerNorm::new(&mut p, "encoder.norm", we);
        let enc_to_dec = Linear::new(&mut p, &mut init, "encoder_to_decoder", we, wd);
        let mask_token = p.add("mask_token", init.trunc_normal(&[1, wd], INIT_STD));
        let dec_pos = p.add("decoder.pos_embed", init.trunc_normal(&[n, wd], INIT_STD));
        let dec_shape = BlockShape {
            width: wd,
            heads: config.decoder_heads,
            head_dim: config.decoder_head_dim,
            mlp_hidden: wd * config.mlp_ratio,
        };
        let dec_blocks = (0..config.decoder_layers)
            .map(|i| Block::new(&mut p, &mut init, &format!("decoder.block{i}"), dec_shape))
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "decoder.norm", wd);
        let head = Linear::new(&mut p, &mut init, "decoder.head", wd, config.tube_dim());
        Ok(Self {
            config,
            params: p,
            embed,
            enc_pos,
            enc_blocks,
            enc_norm,
            enc_to_dec,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            head,
        })
    }

    pub fn from_params(config: MaeConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    fn encode_tokens(&self, g: &mut Graph<T>, p: &Bindings, tubes: Var, positions: &[usize], b: usize) -> Result<Var> {
        let we = self.config.encoder_width;
        let x = self.embed.forward(g, p, tubes)?;
        let pos = g.gather_rows(p[self.enc_pos], positions)?;
        let x = g.add(x, pos)?;
        let x = g.reshape(x, vec![b, positions.len() / b.max(1), we])?;
        let (x, _) = run_blocks(g, p, &self.enc_blocks, x, "encoder")?;
        let x = self.enc_norm.forward(g, p, x)?;
        ensure_finite(g, x, || "encoder norm".into())?;
        Ok(x)
    }

    /// Masked reconstruction. `inputs` are the encoder's tube pixels
    /// `[clips, num_tubes, tube_dim]`; `targets` is a graph value of the same
    /// size holding the regression targets. Only masked tubes enter the loss.
    pub fn reconstruct(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        inputs: &Tensor<T>,
        targets: Var,
        masks: &[MaskedClip],
    ) -> Result<Reconstruction> {
        let cfg = &self.config;
        let n = cfg.num_tubes();
        let b = masks.len();
        if inputs.shape() != [b, n, cfg.tube_dim()] || g.shape(targets).iter().product::<usize>() != inputs.len() {
            return Err(ModelError::Config(format!(
                "tube tensor {:?} does not match {b} clips of {n} tubes",
                inputs.shape()
            )));
        }
        let nv = masks[0].visible.len();
        let nm = n - nv;
        if nm == 0 || masks.iter().any(|m| m.visible.len() != nv || m.masked.len() != nm) {
            return Err(ModelError::Contract("every clip needs the same, non-zero number of masked tubes".into()));
        }
        let flat = g.leaf(inputs);
        let flat = g.reshape(flat, vec![b * n, cfg.tube_dim()])?;
        let vis_rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .flat_map(|(c, m)| m.visible.iter().map(move |&v| c * n + v))
            .collect();
        let vis_pos: Vec<usize> = masks.iter().flat_map(|m| m.visible.iter().copied()).collect();
        let mask_pos: Vec<usize> = masks.iter().flat_map(|m| m.masked.iter().copied()).collect();

        let visible = g.gather_rows(flat, &vis_rows)?;
        let enc = self.encode_tokens(g, p, visible, &vis_pos, b)?;

        let wd = cfg.decoder_width;
        let enc = g.reshape(enc, vec![b * nv, cfg.encoder_width])?;
        let y = self.enc_to_dec.forward(g, p, enc)?;
        let pos_v = g.gather_rows(p[self.dec_pos], &vis_pos)?;
        let y = g.add(y, pos_v)?;
        let m = g.gather_rows(p[self.mask_token], &vec![0; b * nm])?;
        let pos_m = g.gather_rows(p[self.dec_pos], &mask_pos)?;
        let m = g.add(m, pos_m)?;
        let all = g.concat(&[y, m], 0)?;
        // Regroup per clip: that clip's visible tokens followed by its mask tokens.
        let order: Vec<usize> = (0..b)
            .flat_map(|c| (c * nv..(c + 1) * nv).chain(b * nv + c * nm..b * nv + (c + 1) * nm))
            .collect();
        let seq = g.gather_rows(all, &order)?;
        let seq = g.reshape(seq, vec![b, n, wd])?;
        let (x, _) = run_blocks(g, p, &self.dec_blocks, seq, "decoder")?;
        let x = self.dec_norm.forward(g, p, x)?;
        let out = self.head.forward(g, p, x)?;
        ensure_finite(g, out, || "decoder head".into())?;
        let out = g.reshape(out, vec![b * n, cfg.tube_dim()])?;
        let pred_rows: Vec<usize> = (0..b).flat_map(|c| c * n + nv..(c + 1) * n).collect();
        let predicted = g.gather_rows(out, &pred_rows)?;
        let tgt = g.reshape(targets, vec![b * n, cfg.tube_dim()])?;
        let tgt_rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .flat_map(|(c, m)| m.masked.iter().map(move |&v| c * n + v))
            .collect();
        let target = g.gather_rows(tgt, &tgt_rows)?;
        let loss = g.mse(predicted, target)?;
        Ok(Reconstruction { loss, predicted })
    }

    /// Loss of clips built from consecutive frames, with the given masks.
    pub fn clip_loss(&self, images: &Images<T>, masks: &[MaskedClip]) -> Result<f64> {
        let tubes = tubify(images, &self.config)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let targets = g.leaf(&tubes);
        let r = self.reconstruct(&mut g, &p, &tubes, targets, masks)?;
        Ok(g.scalar_value(r.loss).as_f64())
    }

    /// Probe features: each image is repeated to fill one tube, the whole
    /// unmasked grid of the first time slot is encoded and the tokens are
    /// mean-pooled, giving `[N, encoder_width]`.
    pub fn image_features(&self, images: &Images<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if images.size != cfg.image_size {
            return Err(ModelError::Config(format!(
                "image resolution {} does not match configured {}",
                images.size, cfg.image_size
            )));
        }
        let tf = cfg.tube_frames;
        let per_slot = cfg.tubes_per_slot();
        let b = images.count;
        let (s, pz, gsz) = (cfg.image_size, cfg.patch_size, cfg.grid());
        let mut data = Vec::with_capacity(b * per_slot * cfg.tube_dim());
        for i in 0..b {
            let img = images.image(i);
            for gy in 0..gsz {
                for gx in 0..gsz {
                    for _ in 0..tf {
                        for py in 0..pz {
                            let row = (gy * pz + py) * s + gx * pz;
                            data.extend_from_slice(&img[row * CHANNELS..(row + pz) * CHANNELS]);
                        }
                    }
                }
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let tubes = g.constant(vec![b * per_slot, cfg.tube_dim()], data)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..per_slot).collect();
        let enc = self.encode_tokens(&mut g, &p, tubes, &positions, b)?;
        let pooled = g.mean_axis(enc, 1)?;
        Ok(g.tensor(pooled))
    }
}

impl Encoder for VideoMae<f32> {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn feature_dim(&self) -> usize {
        self.config.encoder_width
    }

    fn features(&self, images: &Images<f32>) -> Result<Vec<f32>> {
        Ok(self.image_features(images)?.into_data())
    }
}

/// Deterministic mask seed for clip `k` of training step `step`.
fn mask_seed(train_seed: u64, step: u64, k: usize) -> u64 {
    train_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(k as u64)
}

/// Trains on clips of `clip_length` consecutive frames within episodes;
/// every clip gets a fresh random tube mask.
pub fn train_videomae(
    model: &mut VideoMae<f32>,
    frames: &[Frame],
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    let cfg = model.config.clone();
    let starts = run_starts(frames, cfg.clip_length);
    let mut params = std::mem::take(&mut model.params);
    let model_ref: &VideoMae<f32> = model;
    let mut step = 0u64;
    let result = fit(
        &mut params,
        &starts,
        frames.len(),
        cfg.clip_length,
        &cfg.train,
        sink,
        |g, p, batch| {
            let sel: Vec<&Frame> = batch
                .iter()
                .flat_map(|&s| &frames[s..s + cfg.clip_length])
                .collect();
            let images = Images::from_frames(&sel, cfg.image_size)?;
            let tubes = tubify(&images, &cfg)?;
            let masks = (0..batch.len())
                .map(|k| mask_tubes(cfg.num_tubes(), cfg.mask_ratio, mask_seed(cfg.train.seed, step, k)))
                .collect::<Result<Vec<_>>>()?;
            step += 1;
            let targets = g.constant(tubes.shape().to_vec(), tubes.data().to_vec())?;
            Ok(model_ref.reconstruct(g, p, &tubes, targets, &masks)?.loss)
        },
    );
    model.params = params;
    result
}
