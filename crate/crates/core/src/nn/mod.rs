//! Segmentation network: tensors, layers, losses, optimizer and training.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use loss::{bce_loss, segmentation_loss, soft_jaccard};
pub use params::{load_checkpoint, save_checkpoint, ParamStore, CHECKPOINT_MAGIC};
pub use scalar::Scalar;
pub use tensor::Tensor4;
pub use train::{evaluate, train, EpochRecord, Model, Sample, TrainOptions, TrainOutcome};
pub use unet::{Mode, UNet, UNetConfig};
