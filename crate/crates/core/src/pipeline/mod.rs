//! End-to-end assembly: a small linear encoder, the prior stream, pixel and
//! region context, fusion and a 1×1 classifier, plus synthetic scenes and a
//! toy training loop.

mod config;
mod model;
mod resize;
mod synth;
mod train;

pub use config::{EncoderSpec, Fusion, HcnetConfig};
pub use model::{
    argmax_map, hcnet_backward, hcnet_forward, hcnet_loss, loss_and_grads, pixel_accuracy, HcnetCache, HcnetGrads,
    HcnetOutput, HcnetParams, LossParts, IMAGE_CHANNELS,
};
pub use resize::{subsample2, subsample2_backward, upsample_bilinear, upsample_bilinear_backward};
pub use synth::{class_color, synth_scene, synth_scene_with_areas, SyntheticScene, BACKGROUND};
pub use train::{train_toy, window_means, StepRecord, TrainConfig, TrainOutcome, TrainReport, CLIP_NORM};
