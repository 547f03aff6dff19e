//! Compact residual CNN: an 18-layer residual design truncated after its
//! second stage, trained with the same temporal contrastive loss.

use digitwin_autodiff::{Bindings, Float, Graph, Init, ParamId, ParamStore, Tensor, Var};
use digitwin_sim::Frame;
use serde::{Deserialize, Serialize};

use crate::data::{Images, CHANNELS};
use crate::encoder::Encoder;
use crate::error::{ModelError, Result};
use crate::nn::{ensure_finite, ProjectionHead};
use crate::train::{train_contrastive, CheckpointSink, Contrastive, TrainConfig, TrainLog};

pub const KIND: &str = "cnn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub temperature: f64,
    pub window: usize,
    pub train: TrainConfig,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 32,
            stem_kernel: 5,
            stage_channels: vec![32, 64],
            blocks_per_stage: 2,
            projection_hidden: 256,
            projection_dim: 128,
            temperature: 0.5,
            window: 3,
            train: TrainConfig {
                batch_size: 64,
                ..TrainConfig::default()
            },
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.image_size == 0 || self.stem_channels == 0 || self.stem_kernel % 2 == 0 {
            bad.push("image_size and stem_channels must be positive, stem_kernel odd");
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            bad.push("stages need positive widths and at least one block");
        }
        let downsample = 1usize << (1 + self.stage_channels.len());
        if self.image_size % downsample != 0 {
            bad.push("image_size must be divisible by the total stride");
        }
        if self.projection_dim == 0 || self.projection_hidden == 0 {
            bad.push("projection widths must be positive");
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

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init.he_normal(&[c_out, c_in, k, k], c_in * k * k),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)?)
    }
}

/// Basic residual block: two 3×3 convolutions, with a strided 1×1
/// projection on the shortcut when the shape changes.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        let s = match self.shortcut {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct CnnForward {
    /// Globally average-pooled features `[B, C]`.
    pub pooled: Var,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct Cnn<T: Float> {
    config: CnnConfig,
    params: ParamStore<T>,
    stem: Conv,
    blocks: Vec<(String, ResBlock)>,
    head: ProjectionHead,
}

impl<T: Float> Cnn<T> {
    pub fn new(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut init = Init::new(config.train.seed);
        let stem = Conv::new(&mut p, &mut init, "stem", CHANNELS, config.stem_channels, config.stem_kernel, 2);
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            for k in 0..config.blocks_per_stage {
                let name = format!("stage{}.block{k}", s + 1);
                let stride = if k == 0 { 2 } else { 1 };
                let conv1 = Conv::new(&mut p, &mut init, &format!("{name}.conv1"), c_in, c_out, 3, stride);
                let conv2 = Conv::new(&mut p, &mut init, &format!("{name}.conv2"), c_out, c_out, 3, 1);
                let shortcut = (stride != 1 || c_in != c_out)
                    .then(|| Conv::new(&mut p, &mut init, &format!("{name}.shortcut"), c_in, c_out, 1, stride));
                blocks.push((
                    name,
                    ResBlock {
                        conv1,
                        conv2,
                        shortcut,
                    },
                ));
                c_in = c_out;
            }
        }
        let head = ProjectionHead::new(
            &mut p,
            &mut init,
            "head",
            c_in,
            config.projection_hidden,
            config.projection_dim,
        );
        Ok(Self {
            config,
            params: p,
            stem,
            blocks,
            head,
        })
    }

    pub fn from_params(config: CnnConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn stem(&self) -> Conv {
        self.stem
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlock> {
        self.blocks.iter().map(|(_, b)| b)
    }

    pub fn head(&self) -> ProjectionHead {
        self.head
    }

    /// Weighted layers on the main path, counted the way the 18-layer
    /// design counts them: the stem, every 3×3 convolution and the fully
    /// connected layer after pooling (here the first projection layer).
    /// Shortcut projections are not counted.
    pub fn weighted_layers(&self) -> Vec<String> {
        let mut out = vec!["stem".to_string()];
        for (name, _) in &self.blocks {
            out.push(format!("{name}.conv1"));
            out.push(format!("{name}.conv2"));
        }
        out.push("head.fc1".into());
        out
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bindings, images: &Images<T>) -> Result<CnnForward> {
        if images.size != self.config.image_size {
            return Err(ModelError::Config(format!(
                "image resolution {} does not match configured {}",
                images.size, self.config.image_size
            )));
        }
        let x = g.leaf(&images.to_nchw());
        let x = self.stem.forward(g, p, x)?;
        let mut x = g.relu(x);
        ensure_finite(g, x, || "stem".into())?;
        for (name, blk) in &self.blocks {
            x = blk.forward(g, p, x)?;
            ensure_finite(g, x, || name.clone())?;
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, vec![s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let z = self.head.forward(g, p, pooled)?;
        Ok(CnnForward { pooled, z })
    }

    pub fn encode(&self, images: &Images<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, images)?;
        Ok((g.tensor(out.pooled), g.tensor(out.z)))
    }
}

impl Contrastive for Cnn<f32> {
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

impl Encoder for Cnn<f32> {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn features(&self, images: &Images<f32>) -> Result<Vec<f32>> {
        Ok(self.encode(images)?.0.into_data())
    }
}

pub fn train_cnn(model: &mut Cnn<f32>, frames: &[Frame], sink: Option<&CheckpointSink>) -> Result<TrainLog> {
    train_contrastive(model, frames, sink)
}
