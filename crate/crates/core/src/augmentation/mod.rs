//! Synthetic diver-face generation: frontalization, auto-crop, keypoint
//! regression, mask and snorkel compositing, underwater color, fisheye,
//! tight crop.

mod color;
mod crop;
mod fisheye;
mod frontalize;
mod mask;
mod model;
mod pipeline;
mod templates;

pub use color::{underwater_colorize, UnderwaterParams};
pub use crop::{auto_crop, tight_crop, tight_crop_rect, DEFAULT_TIGHT_MARGIN};
pub use fisheye::{fisheye, FisheyeParams};
pub use frontalize::{delaunay, frontalize, frontalize_detailed, render_posed, FaceProxy, Frontalized, STRETCH_FACTOR};
pub use mask::{apply_mask, fit_affine, load_bundle, Anchor, MaskTemplate, TemplateKind};
pub use model::{dlt, estimate_projection, ProjectionFit, ProjectionMatrix, Reference3DModel};
pub use pipeline::{
    derive_seed, expand_dataset, run_pipeline, ExpandedSample, KeypointSource, PipelineConfig, PipelineOutput,
    StageToggles, TemplateChoice, STAGE_NAMES,
};
pub use templates::{builtin_templates, write_bundle, TEMPLATE_SIZE};

use crate::imaging::ImagingError;
use crate::keypoints::KeypointError;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("template: {0}")]
    Template(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("empty crop: {0}")]
    EmptyCrop(String),
    #[error("stage {stage}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<AugmentError>,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
