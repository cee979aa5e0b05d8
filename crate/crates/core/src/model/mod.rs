//! Vision transformer trained to complete the masked query-target quadrant.

pub mod checkpoint;
mod config;
mod loss;
mod ops;
mod real;
mod vit;

pub use config::{BlockLayout, ModelConfig, ParamLayout, PosInit, TensorInfo, MLP_RATIO};
pub use loss::{smooth_l1, SMOOTH_L1_BETA};
pub use ops::{gelu, layer_norm, softmax_rows, LN_EPS};
pub use real::{gemm, Real, Strided};
pub use vit::{
    decoded_to_image, decoded_to_pixels, denormalize, normalize_u8, CanvasInput, EnsembleHook, ForwardTrace, GradRequest, Gradients,
    ModelState, Trace, PIXEL_MEAN, PIXEL_STD,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("no masked patches to score")]
    EmptyMask,
    #[error("checkpoint configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fresh model from `config.seed`.
pub fn init_model(config: ModelConfig) -> Result<ModelState<f32>, ModelError> {
    ModelState::init(config)
}
