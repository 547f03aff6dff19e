//! Model construction, training and evaluation shared by the commands and
//! the acceptance report.

use std::path::Path;

use digitwin_autodiff::{checkpoint, ParamStore};
use digitwin_eval::{
    features::probe_data, train_decoder, train_linear_probe, two_afc_eval, ModelRef, ProbeReport, ProbeSplit,
    TwoAfcReport,
};
use digitwin_models::{
    train_cnn, train_videomae, train_vit_cot, CheckpointSink, Cnn, Encoder, TrainConfig, TrainLog, ViT, VideoMae,
};
use digitwin_sim::{generate_dataset, generate_probe_set, EpisodeDataset, Frame};

use crate::config::Config;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    #[value(name = "vit-cot")]
    VitCot,
    #[value(name = "videomae")]
    VideoMae,
    #[value(name = "cnn")]
    Cnn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::VitCot => "vit-cot",
            ModelKind::VideoMae => "videomae",
            ModelKind::Cnn => "cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vit-cot" => Some(ModelKind::VitCot),
            "videomae" => Some(ModelKind::VideoMae),
            "cnn" => Some(ModelKind::Cnn),
            _ => None,
        }
    }

    /// Config section holding this model's settings.
    pub fn section(self) -> &'static str {
        match self {
            ModelKind::VitCot => "vit",
            ModelKind::VideoMae => "videomae",
            ModelKind::Cnn => "cnn",
        }
    }
}

pub enum Model {
    Vit(ViT<f32>),
    VideoMae(VideoMae<f32>),
    Cnn(Cnn<f32>),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Vit(_) => ModelKind::VitCot,
            Model::VideoMae(_) => ModelKind::VideoMae,
            Model::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn as_ref(&self) -> ModelRef<'_> {
        match self {
            Model::Vit(m) => ModelRef::Vit(m),
            Model::VideoMae(m) => ModelRef::VideoMae(m),
            Model::Cnn(m) => ModelRef::Cnn(m),
        }
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.as_ref().encoder()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Vit(m) => m.params(),
            Model::VideoMae(m) => m.params(),
            Model::Cnn(m) => m.params(),
        }
    }
}

pub fn train_config(cfg: &Config, kind: ModelKind) -> &TrainConfig {
    match kind {
        ModelKind::VitCot => &cfg.vit.train,
        ModelKind::VideoMae => &cfg.videomae.train,
        ModelKind::Cnn => &cfg.cnn.train,
    }
}

/// Hash of the architecture settings; training settings are excluded so a
/// checkpoint stays loadable under a different schedule.
pub fn architecture_hash(cfg: &Config, kind: ModelKind) -> u64 {
    let text = match kind {
        ModelKind::VitCot => toml::to_string(&digitwin_models::ViTConfig {
            train: TrainConfig::default(),
            ..cfg.vit.clone()
        }),
        ModelKind::VideoMae => toml::to_string(&digitwin_models::MaeConfig {
            train: TrainConfig::default(),
            ..cfg.videomae.clone()
        }),
        ModelKind::Cnn => toml::to_string(&digitwin_models::CnnConfig {
            train: TrainConfig::default(),
            ..cfg.cnn.clone()
        }),
    }
    .expect("model config serializes");
    checkpoint::config_hash(&text)
}

pub fn init_model(cfg: &Config, kind: ModelKind) -> Result<Model> {
    Ok(match kind {
        ModelKind::VitCot => Model::Vit(ViT::new(cfg.vit.clone())?),
        ModelKind::VideoMae => Model::VideoMae(VideoMae::new(cfg.videomae.clone())?),
        ModelKind::Cnn => Model::Cnn(Cnn::new(cfg.cnn.clone())?),
    })
}

pub fn sink(cfg: &Config, kind: ModelKind, dir: &Path) -> CheckpointSink {
    CheckpointSink {
        dir: dir.to_path_buf(),
        kind: kind.as_str().into(),
        config_hash: architecture_hash(cfg, kind),
    }
}

/// Encoded checkpoint of the model's current weights.
pub fn checkpoint_bytes(cfg: &Config, model: &Model) -> Vec<u8> {
    let kind = model.kind();
    checkpoint::encode(
        kind.as_str(),
        architecture_hash(cfg, kind),
        train_config(cfg, kind).seed,
        model.params(),
    )
}

pub fn train_model(model: &mut Model, frames: &[Frame], sink: Option<&CheckpointSink>) -> Result<TrainLog> {
    Ok(match model {
        Model::Vit(m) => train_vit_cot(m, frames, sink)?,
        Model::VideoMae(m) => train_videomae(m, frames, sink)?,
        Model::Cnn(m) => train_cnn(m, frames, sink)?,
    })
}

/// Loads a checkpoint written for `cfg`'s architecture.
pub fn load_model(cfg: &Config, path: &Path) -> Result<Model> {
    let (header, params) = checkpoint::load::<f32>(path)?;
    let kind = ModelKind::parse(&header.kind)
        .ok_or_else(|| CliError::Run(format!("{}: unknown model kind `{}`", path.display(), header.kind)))?;
    if header.config_hash != architecture_hash(cfg, kind) {
        return Err(CliError::Run(format!(
            "{}: checkpoint was written for a different [{}] architecture",
            path.display(),
            kind.section()
        )));
    }
    Ok(match kind {
        ModelKind::VitCot => Model::Vit(ViT::from_params(cfg.vit.clone(), &params)?),
        ModelKind::VideoMae => Model::VideoMae(VideoMae::from_params(cfg.videomae.clone(), &params)?),
        ModelKind::Cnn => Model::Cnn(Cnn::from_params(cfg.cnn.clone(), &params)?),
    })
}

/// The rearing-condition training frames described by `cfg`.
pub fn rearing_data(cfg: &Config) -> Result<EpisodeDataset> {
    Ok(generate_dataset(cfg.data.condition, cfg.data.frames, cfg.seed, &cfg.data.dataset)?)
}

/// The 24 labelled probe subsets described by `cfg`.
pub fn probe_sets(cfg: &Config) -> Result<Vec<EpisodeDataset>> {
    Ok(generate_probe_set(cfg.data.probe_per_subset, cfg.data.probe_seed, &cfg.data.dataset)?)
}

pub fn probe(cfg: &Config, model: &Model, probes: &[EpisodeDataset]) -> Result<ProbeReport> {
    let data = probe_data(model.encoder(), probes)?;
    let split = ProbeSplit::new(cfg.probe.mode, cfg.probe.split_seed);
    Ok(train_linear_probe(&data, &split, &cfg.probe.optimizer)?)
}

pub fn two_afc(cfg: &Config, model: &Model, imprint: &[Frame], probes: &[EpisodeDataset]) -> Result<TwoAfcReport> {
    let decoder = train_decoder(model.encoder(), imprint, &cfg.twoafc.decoder)?;
    Ok(two_afc_eval(
        model.encoder(),
        &decoder,
        cfg.twoafc.imprinted,
        probes,
        &cfg.twoafc.trials,
    )?)
}

/// The first `per_viewpoint` frames of every probe subset, in subset order.
pub fn heatmap_frames(probes: &[EpisodeDataset], per_viewpoint: usize) -> Vec<&Frame> {
    probes
        .iter()
        .flat_map(|s| s.frames.iter().take(per_viewpoint))
        .collect()
}
