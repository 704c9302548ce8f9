//! Perturbative GAN engine: perturbation layers and modules, the generator
//! and critic zoo, WGAN-GP training, evaluation metrics and data handling.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod trainer;
pub mod zoo;

pub use arch::{Act, Block, ModelSpec, ModuleSpec, PerturbSpec, Role, UpMode};
pub use checkpoint::Checkpoint;
pub use config::{DatasetRef, TrainConfig};
pub use data::{Dataset, SynthKind};
pub use layers::{bind, MaskBank, MaskConfig, Mode, Net};
pub use metrics::{pixel_moment_distance, proxy_inception_score, ProxyClassifier};
pub use params::{Buffers, ParamStore};
pub use trainer::{adam_step, wgan_gp_losses, AdamHyper, AdamState, TrainHistory, Trainer};
pub use zoo::{build, Variant, ZooConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] pgan_tensor::Error),
    #[error(transparent)]
    Noise(#[from] pgan_noise::NoiseError),
    #[error("model: {0}")]
    Model(String),
    #[error("architecture file: {0}")]
    Arch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("architecture hash mismatch for {model}: checkpoint has {stored}, file gives {found}")]
    HashMismatch {
        model: String,
        stored: String,
        found: String,
    },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: u64, what: String },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the file system rather than of inputs or contracts.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Tensor(pgan_tensor::Error::Io(_)))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
