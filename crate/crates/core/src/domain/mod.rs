//! Emotion taxonomy, image buffers and manifest records.

pub mod emotion;
pub mod image;
pub mod manifest;

pub use emotion::{
    class_order_hash, one_hot_encode, valence_of, EmotionDistribution, EmotionLabel, EmotionOneHot,
    Valence, NUM_EMOTIONS,
};
pub use image::ImageBuffer;
pub use manifest::{
    manifest_read, manifest_write, EditPair, LabeledImage, PairRecord, SubsetTag,
};
