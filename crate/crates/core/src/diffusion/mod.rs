//! The trainable editor: frozen codec, noise schedule, encoders, the
//! conditional denoiser, losses and the training loop.

pub mod codec;
pub mod encoders;
pub mod loss;
pub mod schedule;
pub mod train;
pub mod unet;

pub use codec::{train_codec, CodecConfig, CodecTrainConfig, CodecTrainReport, LatentCodec};
pub use encoders::{
    EmotionEncoder, EmotionEncoderConfig, InstructionEmbedding, TextEncoder, TextEncoderConfig, DEFAULT_EMBED_WIDTH,
};
pub use loss::{alignment_loss, alignment_loss_tensor, noise_loss, LossBreakdown, DEFAULT_LAMBDA};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{
    batch_loss, editor_paths, prepare_examples, sample_step_noise, smoothed, train_editor, EditorConfig, EditorNets,
    EditorTrainConfig, EditorTrainer, StepNoise, TrainExample, DEFAULT_CONDITION_DROPOUT,
};
pub use unet::{Denoiser, DenoiserConfig};
