//! Scene optimization, refinement, editing and toy-denoiser pretraining.

pub mod config;
pub mod edit;
pub mod metrics;
pub mod painter;
pub mod pretrain;
pub mod sampler;
pub mod scene;
pub mod toy;

pub use edit::{apply_edit, edit_scene, load_edit_script, parse_edit_script, SceneEdit};
pub use config::{LossWeights, PretrainConfig, RefineSettings, TrainConfig};
pub use metrics::{MetricsLog, StepMetrics};
pub use painter::{class_color, painter_distance, style_by_name, PainterOracle, STYLE_NAMES};
pub use pretrain::{pretrain_toy_denoiser, PretrainReport, PretrainScene};
pub use sampler::{MonoDepthProvider, SamplerConfig, SyntheticMonoDepth, TrajectorySampler};
pub use scene::{apply_field_update, eval_cameras, evaluate, optimize_scene, refine_scene, EvalReport, Guidance, PhaseReport, RunContext};
pub use toy::{toy_field_config, toy_layout, toy_trajectory};
