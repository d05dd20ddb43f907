//! Small convolutional autoencoder mapping images to latent grids. Trained
//! once on the corpus, then frozen.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Conv2d;
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::domain::ImageBuffer;
use crate::error::{Error, Result};
use crate::nn::{rng_from, to_f64_vec, Adam, ParamStore};

const CHECKPOINT_KIND: &str = "latent-codec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub image_side: usize,
    pub latent_channels: usize,
    /// Encoder widths; each stage halves the resolution.
    pub encoder_channels: [usize; 3],
    /// Decoder widths; each stage after the first doubles it.
    pub decoder_channels: [usize; 3],
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            latent_channels: 4,
            encoder_channels: [16, 32, 32],
            decoder_channels: [32, 32, 16],
            seed: 5,
        }
    }
}

impl CodecConfig {
    pub fn latent_side(&self) -> usize {
        self.image_side / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 8 != 0 {
            return Err(Error::Config(format!("codec image side {} must be a multiple of 8", self.image_side)));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("codec needs latent channels".into()));
        }
        Ok(())
    }
}

pub struct LatentCodec {
    config: CodecConfig,
    params: ParamStore,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    latent_scale: f64,
}

impl LatentCodec {
    pub fn new(config: CodecConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(config.seed, dtype);
        let [e0, e1, e2] = config.encoder_channels;
        let [d0, d1, d2] = config.decoder_channels;
        let lc = config.latent_channels;
        let enc = vec![
            p.conv2d("enc0", 3, e0, 3, 2, 1)?,
            p.conv2d("enc1", e0, e1, 3, 2, 1)?,
            p.conv2d("enc2", e1, e2, 3, 2, 1)?,
            p.conv2d("enc_out", e2, lc, 3, 1, 1)?,
        ];
        let dec = vec![
            p.conv2d("dec_in", lc, d0, 3, 1, 1)?,
            p.conv2d("dec0", d0, d1, 3, 1, 1)?,
            p.conv2d("dec1", d1, d2, 3, 1, 1)?,
            p.conv2d("dec_out", d2, 3, 3, 1, 1)?,
        ];
        Ok(Self {
            config,
            params: p,
            enc,
            dec,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Multiplier applied to raw encoder outputs so latents have roughly
    /// unit variance.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let s = self.config.latent_side();
        (self.config.latent_channels, s, s)
    }

    /// Checksum of weights and scale; identifies the codec an editor was
    /// trained against.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(format!("{}:{:e}", self.params.checksum()?, self.latent_scale))
    }

    pub fn image_tensor(&self, images: &[&ImageBuffer]) -> Result<Tensor> {
        let side = self.config.image_side;
        let mut data = Vec::with_capacity(images.len() * 3 * side * side);
        for img in images {
            if img.height() != side || img.width() != side {
                return Err(Error::Shape(format!(
                    "codec expects {side}x{side} images, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(img.to_chw(-1.0, 1.0));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, side, side), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }

    fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        let mut side = self.config.latent_side();
        for (i, conv) in self.dec.iter().enumerate() {
            if i > 0 {
                side *= 2;
                h = h.upsample_nearest2d(side, side)?;
            }
            h = conv.forward(&h)?;
            if i + 1 < self.dec.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    /// Scaled latents (B, C, h, w) for a batch of images.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.encode_raw(x)? * self.latent_scale)?.detach())
    }

    /// Pixel-space tensor in [-1, 1] (unclamped) from scaled latents.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(&(z / self.latent_scale)?)?.detach())
    }

    pub fn encode(&self, image: &ImageBuffer) -> Result<Tensor> {
        self.encode_tensor(&self.image_tensor(&[image])?)
    }

    pub fn encode_batch(&self, images: &[&ImageBuffer]) -> Result<Tensor> {
        self.encode_tensor(&self.image_tensor(images)?)
    }

    /// Decodes a (1, C, h, w) latent into an image.
    pub fn decode(&self, z: &Tensor) -> Result<ImageBuffer> {
        let x = self.decode_tensor(z)?;
        let side = self.config.image_side;
        let data: Vec<f32> = to_f64_vec(&x)?.into_iter().map(|v| v as f32).collect();
        ImageBuffer::from_chw(side, side, &data, -1.0, 1.0)
    }

    pub fn reconstruct(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        self.decode(&self.encode(image)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND, &self.config, self.params.tensors(""))?;
        ckpt.header.extra = serde_json::json!({ "latent_scale": self.latent_scale });
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut codec = Self::new(ckpt.config()?, DType::F32)?;
        codec.params.load(&ckpt.tensors, "")?;
        codec.latent_scale = ckpt
            .header
            .extra
            .get("latent_scale")
            .and_then(|v| v.as_f64())
            .filter(|s| s.is_finite() && *s > 0.0)
            .ok_or_else(|| Error::Checkpoint("codec checkpoint lacks a valid latent scale".into()))?;
        Ok(codec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            learning_rate: 2e-3,
            batch_size: 16,
            seed: 9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Mean absolute reconstruction error on the training images, 0..255.
    pub reconstruction_mae: f64,
    pub latent_scale: f64,
}

/// Fits the autoencoder with pixel MSE, then sets the latent scale from
/// the standard deviation of the training latents.
pub fn train_codec(
    images: &[ImageBuffer],
    model_config: CodecConfig,
    config: &CodecTrainConfig,
) -> Result<(LatentCodec, CodecTrainReport)> {
    if images.is_empty() {
        return Err(Error::InvalidValue("codec training needs images".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let mut codec = LatentCodec::new(model_config, DType::F32)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = rng_from(config.seed, 21);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ImageBuffer> = chunk.iter().map(|&i| &images[i]).collect();
            let x = codec.image_tensor(&batch)?;
            let loss = (codec.decode_raw(&codec.encode_raw(&x)?)? - &x)?.sqr()?.mean_all()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: "codec".into(),
                });
            }
            let grads = loss.backward()?;
            opt.step(&[("", &codec.params)], &grads)?;
            total += value;
            n += 1;
        }
        let mean = total / n as f64;
        info!("codec epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut mae = 0.0;
    for chunk in images.chunks(config.batch_size) {
        let batch: Vec<&ImageBuffer> = chunk.iter().collect();
        let x = codec.image_tensor(&batch)?;
        let z = codec.encode_raw(&x)?;
        for v in to_f64_vec(&z)? {
            sum += v;
            sq += v * v;
            count += 1;
        }
        let rec = codec.decode_raw(&z)?.clamp(-1.0, 1.0)?;
        let err = (rec - &x)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        mae += err * chunk.len() as f64 * 127.5;
    }
    let mean = sum / count as f64;
    let std = (sq / count as f64 - mean * mean).max(1e-12).sqrt();
    codec.latent_scale = 1.0 / std;
    let reconstruction_mae = mae / images.len() as f64;
    info!("codec reconstruction mae {reconstruction_mae:.2}, latent scale {:.4}", codec.latent_scale);
    let report = CodecTrainReport {
        epoch_losses,
        reconstruction_mae,
        latent_scale: codec.latent_scale,
    };
    Ok((codec, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EmotionLabel;
    use crate::synth::synth_image;

    fn tiny_config() -> CodecConfig {
        CodecConfig {
            image_side: 16,
            latent_channels: 2,
            encoder_channels: [4, 4, 4],
            decoder_channels: [4, 4, 4],
            seed: 1,
        }
    }

    #[test]
    fn shapes_and_round_trip_checkpoint() {
        let img = synth_image(EmotionLabel::Awe, 0, 16, 3, 0.0);
        let (codec, report) = train_codec(
            &[img.clone()],
            tiny_config(),
            &CodecTrainConfig {
                epochs: 2,
                batch_size: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.latent_scale > 0.0);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.dims(), &[1, 2, 2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        codec.save(&path).unwrap();
        let back = LatentCodec::load(&path).unwrap();
        assert_eq!(back.fingerprint().unwrap(), codec.fingerprint().unwrap());
        assert_eq!(back.reconstruct(&img).unwrap(), codec.reconstruct(&img).unwrap());
        assert!(codec.encode(&ImageBuffer::filled(8, 8, [0, 0, 0])).is_err());
    }

    #[test]
    fn bad_side_rejected() {
        let cfg = CodecConfig {
            image_side: 20,
            ..tiny_config()
        };
        assert!(LatentCodec::new(cfg, DType::F32).is_err());
    }
}
