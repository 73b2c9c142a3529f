//! Convolutional network stack: tensors, layers with hand-written backward
//! passes, the U-Net, Adam and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use tensor::{Real, Tensor};
pub use train::{predict, predict_batch, train, TrainConfig, TrainReport};
pub use unet::{ParameterSet, UNet, UNetConfig};
