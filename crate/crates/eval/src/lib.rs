//! Evaluation of frozen encoders: viewpoint-fold linear probes, training
//! data sweeps, the forced-choice reconstruction test, attention heatmaps
//! and embedding export.

pub mod error;
pub mod features;
pub mod probe;
pub mod stats;
pub mod sweep;
pub mod twoafc;
pub mod viz;

pub use error::{EvalError, Result};
pub use probe::{train_linear_probe, LinearProbe, ProbeConfig, ProbeData, ProbeMode, ProbeReport, ProbeSplit};
pub use stats::{chi_square_test, spearman, ChiSquare};
pub use sweep::{data_size_sweep, SweepReport, SweepRow};
pub use twoafc::{train_decoder, two_afc_eval, DecoderConfig, FcDecoder, TwoAfcConfig, TwoAfcReport};
pub use viz::{attention_heatmap, attention_heatmaps, export_embeddings, heatmap_video, pca_project, HeatmapSet, ModelRef, PcaProjection};
