//! Stage one: the component autoencoder and the associative memory buffer
//! built from its latent codes.

mod buffer;
mod model;
mod train;

pub use buffer::{BufferSource, MemoryBuffer, Retrieval, SourceTrajectory};
pub use model::{AeConfig, AutoencoderModel, ComponentStats};
pub use train::{
    reconstruction_error, train_autoencoder, AeTrainConfig, AeTrainReport, ComponentLosses, CurvePoint,
    ReconstructionError,
};
