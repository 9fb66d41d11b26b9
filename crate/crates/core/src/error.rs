//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by registry, codec, diffusion, training, and I/O operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("modality `{0}` is already registered")]
    DuplicateModality(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("modality id {0} out of range (registry has {1} modalities)")]
    ModalityIdOutOfRange(usize, usize),

    #[error("source and target modality must differ (got `{0}`)")]
    IdenticalEndpoints(String),

    #[error("invalid modality spec: {0}")]
    InvalidSpec(String),

    #[error("registry is frozen; no further registration allowed")]
    RegistryFrozen,

    #[error("invalid schedule parameters: {0}")]
    InvalidSchedule(String),

    #[error("step index {t} out of range for schedule with {total} steps")]
    StepOutOfRange { t: usize, total: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("latent is already scaled; refusing to scale twice")]
    AlreadyScaled,

    #[error("latent is not scaled; nothing to remove")]
    NotScaled,

    #[error("scale factor for modality `{0}` is not set")]
    ScaleUnset(String),

    #[error("latent statistics degenerate for modality `{0}` (zero variance)")]
    DegenerateLatents(String),

    #[error("expected an unscaled latent for decode (got scaled=true)")]
    ScaledLatentAtDecode,

    #[error("expected scaled latents for backbone input (got scaled=false)")]
    UnscaledBackboneInput,

    #[error("non-finite values encountered in {0}; aborting")]
    NonFinite(String),

    #[error("direction {0} is not in the trained set for this run")]
    DirectionNotTrained(String),

    #[error("invalid direction syntax `{0}` (expected SRC:TGT)")]
    BadDirectionSyntax(String),

    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    #[error("checkpoint format error in `{file}`: {reason}")]
    CheckpointFormat { file: String, reason: String },

    #[error("dataset error in `{file}`: {reason}")]
    DatasetFormat { file: String, reason: String },

    #[error("empty test set for direction {0}")]
    EmptyTestSet(String),

    #[error("image smaller than the SSIM window (need at least 11x11)")]
    ImageTooSmallForSsim,

    #[error("invalid sample config: {0}")]
    InvalidSampleConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
