//! The frozen instruction encoder and the trainable emotion encoder τ.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{EmotionLabel, EmotionOneHot, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::nn::{tensor_from_f32, ParamStore};

pub const DEFAULT_EMBED_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub buckets: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            buckets: 1024,
            width: DEFAULT_EMBED_WIDTH,
            seed: 4242,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    pub vector: Vec<f32>,
    pub source_text: String,
}

/// Bag of hashed lowercase tokens through a fixed random projection. Never
/// trained; the projection is fully determined by the seed.
pub struct TextEncoder {
    config: TextEncoderConfig,
    params: ParamStore,
    projection: Tensor,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn bucket(token: &str, buckets: usize) -> usize {
    let d = Sha256::digest(token.as_bytes());
    (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % buckets as u64) as usize
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, dtype: DType) -> Result<Self> {
        if config.buckets == 0 || config.width == 0 {
            return Err(Error::Config("text encoder needs positive buckets and width".into()));
        }
        let mut params = ParamStore::new(config.seed, dtype);
        let std = (1.0 / config.width as f32).sqrt();
        let projection = params.normal("projection", &[config.buckets, config.width], std)?;
        Ok(Self {
            config,
            params,
            projection,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn bag(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidValue(format!("instruction {text:?} has no tokens")));
        }
        let mut bag = vec![0f32; self.config.buckets];
        for t in &tokens {
            bag[bucket(t, self.config.buckets)] += 1.0;
        }
        let norm = bag.iter().map(|v| v * v).sum::<f32>().sqrt();
        Ok(bag.into_iter().map(|v| v / norm).collect())
    }

    /// (B, width) embeddings, one row per text.
    pub fn encode_batch(&self, texts: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.config.buckets);
        for t in texts {
            data.extend(self.bag(t)?);
        }
        let bags = tensor_from_f32(data, &[texts.len(), self.config.buckets], self.params.dtype())?;
        Ok(bags.matmul(&self.projection)?.detach())
    }

    pub fn encode(&self, text: &str) -> Result<InstructionEmbedding> {
        let v = self.encode_batch(&[text])?;
        Ok(InstructionEmbedding {
            vector: v.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
            source_text: text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionEncoderConfig {
    pub hidden: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for EmotionEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_EMBED_WIDTH,
            width: DEFAULT_EMBED_WIDTH,
            seed: 31,
        }
    }
}

/// Two fully connected blocks 8 -> hidden -> width, plus the learned null
/// embedding used when the emotion condition is dropped.
pub struct EmotionEncoder {
    config: EmotionEncoderConfig,
    params: ParamStore,
    fc1: Linear,
    fc2: Linear,
    null: Tensor,
}

impl EmotionEncoder {
    pub fn new(config: EmotionEncoderConfig, dtype: DType) -> Result<Self> {
        if config.hidden == 0 || config.width == 0 {
            return Err(Error::Config("emotion encoder needs positive widths".into()));
        }
        let mut params = ParamStore::new(config.seed, dtype);
        let fc1 = params.linear("fc1", NUM_EMOTIONS, config.hidden)?;
        let fc2 = params.linear("fc2", config.hidden, config.width)?;
        let null = params.normal("null", &[1, config.width], 0.1)?;
        Ok(Self {
            config,
            params,
            fc1,
            fc2,
            null,
        })
    }

    pub fn config(&self) -> &EmotionEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// (B, 8) one-hot rows to (B, width).
    pub fn forward(&self, one_hot: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(one_hot)?.silu()?;
        Ok(self.fc2.forward(&h)?)
    }

    pub fn one_hot_batch(&self, labels: &[EmotionLabel]) -> Result<Tensor> {
        let data: Vec<f32> = labels.iter().flat_map(|l| l.one_hot().to_f32()).collect();
        tensor_from_f32(data, &[labels.len(), NUM_EMOTIONS], self.params.dtype())
    }

    pub fn encode(&self, label: EmotionLabel) -> Result<Tensor> {
        self.encode_one_hot(&label.one_hot())
    }

    pub fn encode_one_hot(&self, one_hot: &EmotionOneHot) -> Result<Tensor> {
        let x = tensor_from_f32(one_hot.to_f32().to_vec(), &[1, NUM_EMOTIONS], self.params.dtype())?;
        self.forward(&x)
    }

    /// Validates a raw vector as a one-hot before encoding.
    pub fn encode_raw(&self, values: &[f64]) -> Result<Tensor> {
        self.encode_one_hot(&EmotionOneHot::from_slice(values)?)
    }

    /// (1, width) learned null embedding.
    pub fn null_embedding(&self) -> &Tensor {
        &self.null
    }

    pub fn to_vec(&self, embedding: &Tensor) -> Result<Vec<f64>> {
        Ok(embedding.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

/// Rows of `a` where `mask` is false, rows of `b` where it is true.
pub(crate) fn select_rows(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m: Vec<u8> = mask.iter().map(|&x| u8::from(x)).collect();
    let mut shape = vec![1; a.rank()];
    shape[0] = mask.len();
    let m = Tensor::from_vec(m, shape, &Device::Cpu)?.broadcast_as(a.shape())?;
    let b = b.broadcast_as(a.shape())?;
    Ok(m.where_cond(&b, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_encoder_is_deterministic_and_frozen_by_seed() {
        let a = TextEncoder::new(TextEncoderConfig::default(), DType::F32).unwrap();
        let b = TextEncoder::new(TextEncoderConfig::default(), DType::F32).unwrap();
        let x = a.encode("Add warm sunset light").unwrap();
        assert_eq!(x.vector, b.encode("add warm   sunset light!").unwrap().vector);
        assert_eq!(x.vector.len(), DEFAULT_EMBED_WIDTH);
        assert_ne!(x.vector, a.encode("add cold rain").unwrap().vector);
        assert_eq!(a.params().checksum().unwrap(), b.params().checksum().unwrap());
        assert!(a.encode(" ,.; ").is_err());
    }

    #[test]
    fn emotion_encoder_contract() {
        let enc = EmotionEncoder::new(EmotionEncoderConfig::default(), DType::F32).unwrap();
        let embs: Vec<Vec<f64>> = EmotionLabel::ALL
            .iter()
            .map(|&l| enc.to_vec(&enc.encode(l).unwrap()).unwrap())
            .collect();
        assert_eq!(embs[2], enc.to_vec(&enc.encode(EmotionLabel::Contentment).unwrap()).unwrap());
        for i in 0..8 {
            assert!(embs[i].iter().all(|v| v.is_finite()));
            for j in i + 1..8 {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0, "{i} vs {j}");
            }
        }
        assert!(enc.encode_raw(&[0.0; 8]).is_err());
        assert!(enc.encode_raw(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(enc.encode_raw(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn row_selection() {
        let a = Tensor::new(&[[1f32, 1.0], [2.0, 2.0], [3.0, 3.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[9f32, 8.0]], &Device::Cpu).unwrap();
        let s = select_rows(&[false, true, false], &a, &b).unwrap();
        assert_eq!(s.to_vec2::<f32>().unwrap(), vec![vec![1.0, 1.0], vec![9.0, 8.0], vec![3.0, 3.0]]);
    }
}
