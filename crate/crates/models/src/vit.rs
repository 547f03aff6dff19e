//! Vision transformer trained with contrastive learning through time.

use digitwin_autodiff::{Bindings, Float, Graph, Init, ParamId, ParamStore, Tensor, Var};
use digitwin_sim::Frame;
use serde::{Deserialize, Serialize};

use crate::data::{patchify, Images, CHANNELS};
use crate::error::{ModelError, Result};
use crate::nn::{ensure_finite, run_blocks, Block, BlockShape, LayerNorm, Linear, ProjectionHead, INIT_STD};
use crate::encoder::Encoder;
use crate::train::{train_contrastive, CheckpointSink, Contrastive, TrainConfig, TrainLog};

pub const KIND: &str = "vit-cot";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub temperature: f64,
    pub window: usize,
    pub train: TrainConfig,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::with_heads(1).expect("1 head is a valid size")
    }
}

impl ViTConfig {
    /// The size family: heads = layers, widths 64/96/192/288 for 1/3/6/9 heads.
    pub fn with_heads(heads: usize) -> Result<Self> {
        let embed_dim = match heads {
            1 => 64,
            3 => 96,
            6 => 192,
            9 => 288,
            _ => return Err(ModelError::Config(format!("no preset for {heads} heads (use 1, 3, 6 or 9)"))),
        };
        Ok(Self {
            image_size: 64,
            patch_size: 8,
            channels: CHANNELS,
            embed_dim,
            num_heads: heads,
            num_layers: heads,
            mlp_ratio: 4,
            projection_hidden: 256,
            projection_dim: 128,
            temperature: 0.5,
            window: 3,
            train: TrainConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bad.push("image_size must be a positive multiple of patch_size");
        }
        if self.channels != CHANNELS {
            bad.push("channels must be 3");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            bad.push("embed_dim must be a positive multiple of num_heads");
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 || self.projection_dim == 0 || self.projection_hidden == 0 {
            bad.push("layer counts and widths must be positive");
        }
        if !(self.temperature > 0.0) {
            bad.push("temperature must be positive");
        }
        if !(2..=3).contains(&self.window) {
            bad.push("window must be 2 or 3");
        }
        if !bad.is_empty() {
            return Err(ModelError::Config(bad.join("; ")));
        }
        self.train.validate()
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ViTForward {
    /// Token sequence entering the first block, `[B, T, D]`.
    pub tokens: Var,
    /// Final-layer class token after the last norm, `[B, D]`.
    pub cls: Var,
    /// L2-normalised projection, `[B, projection_dim]`.
    pub z: Var,
    /// Attention weights of every block, `[B·H, T, T]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ViT<T: Float> {
    config: ViTConfig,
    params: ParamStore<T>,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: ProjectionHead,
}

impl<T: Float> ViT<T> {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Init::new(config.train.seed);
        let d = config.embed_dim;
        let patch_embed = Linear::new(&mut p, &mut init, "patch_embed", config.patch_dim(), d);
        let cls_token = p.add("cls_token", init.trunc_normal(&[1, d], INIT_STD));
        let pos_embed = p.add("pos_embed", init.trunc_normal(&[config.seq_len(), d], INIT_STD));
        let shape = BlockShape {
            width: d,
            heads: config.num_heads,
            head_dim: d / config.num_heads,
            mlp_hidden: d * config.mlp_ratio,
        };
        let blocks = (0..config.num_layers)
            .map(|i| Block::new(&mut p, &mut init, &format!("block{i}"), shape))
            .collect();
        let norm = LayerNorm::new(&mut p, "norm", d);
        let head = ProjectionHead::new(
            &mut p,
            &mut init,
            "head",
            d,
            config.projection_hidden,
            config.projection_dim,
        );
        Ok(Self {
            config,
            params: p,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Rebuilds a model around stored weights, checking names and shapes.
    pub fn from_params(config: ViTConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn patch_embed(&self) -> Linear {
        self.patch_embed
    }

    pub fn cls_token_id(&self) -> ParamId {
        self.cls_token
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos_embed
    }

    pub fn norm(&self) -> LayerNorm {
        self.norm
    }

    pub fn head(&self) -> ProjectionHead {
        self.head
    }

    /// Same architecture with weights converted to another precision.
    pub fn cast<U: Float>(&self) -> ViT<U> {
        ViT {
            config: self.config.clone(),
            params: self.params.cast(),
            patch_embed: self.patch_embed,
            cls_token: self.cls_token,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            norm: self.norm,
            head: self.head,
        }
    }

    pub fn patchify(&self, images: &Images<T>) -> Result<Tensor<T>> {
        patchify(images, self.config.patch_size, self.config.image_size)
    }

    /// Forward pass from raw patches `[B, P, patch_dim]`.
    pub fn forward_patches(&self, g: &mut Graph<T>, p: &Bindings, patches: Var) -> Result<ViTForward> {
        let s = g.shape(patches).to_vec();
        let c = &self.config;
        if s.len() != 3 || s[1] != c.num_patches() || s[2] != c.patch_dim() {
            return Err(ModelError::Config(format!(
                "patch tensor {s:?} does not match [B, {}, {}]",
                c.num_patches(),
                c.patch_dim()
            )));
        }
        let b = s[0];
        let d = c.embed_dim;
        let emb = self.patch_embed.forward(g, p, patches)?;
        ensure_finite(g, emb, || "patch embedding".into())?;
        let cls = g.gather_rows(p[self.cls_token], &vec![0; b])?;
        let cls = g.reshape(cls, vec![b, 1, d])?;
        let seq = g.concat(&[cls, emb], 1)?;
        let tokens = g.add_broadcast(seq, p[self.pos_embed])?;
        let (x, attention) = run_blocks(g, p, &self.blocks, tokens, "encoder")?;
        let x = self.norm.forward(g, p, x)?;
        ensure_finite(g, x, || "final norm".into())?;
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, vec![b, d])?;
        let z = self.head.forward(g, p, cls)?;
        Ok(ViTForward {
            tokens,
            cls,
            z,
            attention,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bindings, images: &Images<T>) -> Result<ViTForward> {
        let patches = self.patchify(images)?;
        let pv = g.leaf(&patches);
        self.forward_patches(g, p, pv)
    }

    /// Frozen evaluation: (class-token features `[B, D]`, projections `[B, projection_dim]`).
    pub fn encode(&self, images: &Images<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, images)?;
        Ok((g.tensor(out.cls), g.tensor(out.z)))
    }

    /// Class-token attention rows of the final block: `[B, H, T]`
    /// (index 0 is the class token itself, 1.. are patches).
    pub fn cls_attention(&self, images: &Images<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, images)?;
        let last = *out.attention.last().expect("at least one block");
        let (b, h, t) = (images.count, self.config.num_heads, self.config.seq_len());
        let a = g.value(last);
        let mut rows = Vec::with_capacity(b * h * t);
        for bh in 0..b * h {
            rows.extend_from_slice(&a[bh * t * t..bh * t * t + t]);
        }
        Ok(Tensor::new(vec![b, h, t], rows)?)
    }
}

impl Contrastive for ViT<f32> {
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn window(&self) -> usize {
        self.config.window
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn train_config(&self) -> &TrainConfig {
        &self.config.train
    }

    fn project(&self, g: &mut Graph<f32>, p: &Bindings, images: &Images<f32>) -> Result<Var> {
        Ok(self.forward(g, p, images)?.z)
    }
}

impl Encoder for ViT<f32> {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn feature_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn features(&self, images: &Images<f32>) -> Result<Vec<f32>> {
        Ok(self.encode(images)?.0.into_data())
    }
}

/// Trains the encoder in place on a temporally ordered frame sequence.
pub fn train_vit_cot(
    model: &mut ViT<f32>,
    frames: &[Frame],
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    train_contrastive(model, frames, sink)
}
