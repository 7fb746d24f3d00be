//! The assembled detector: configuration, network, loss, training and inference.

mod augment;
mod config;
mod detect;
mod loss;
mod model;
mod train;

pub use augment::{
    augment_sample, augment_sample_with_record, crop_and_resize, mirror, mirror_box, AugmentRecord, Patch,
};
pub use config::*;
pub use detect::{clip_box, decode_detections, detect};
pub use loss::{background_losses, batch_targets, total_loss, LossComponents, LossVars};
pub use model::{Detector, ForwardOutput, ForwardVars, LayerOutput, HEAD_INIT_GAIN, INPUT_MEAN, INPUT_STD};
pub use train::{loss_and_grads, train_step, LossAndGrads, LossRecord, SgdState, Trainer};
