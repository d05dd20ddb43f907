//! The emotion classifier: a small convolutional network whose last conv
//! block doubles as the Grad-CAM feature layer.

mod gradcam;

pub use gradcam::{binarize_saliency, grad_cam, CamModel, SaliencyMap, DEFAULT_SALIENCY_THRESHOLD};

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Linear};
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::domain::{EmotionDistribution, EmotionLabel, ImageBuffer, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::nn::{rng_from, to_f64_vec, Adam, ParamStore};

const CHECKPOINT_KIND: &str = "emotion-predictor";

/// Anything that can score an image over the eight categories and explain
/// its decision with a saliency map.
pub trait EmotionPredictor: Sync {
    fn predict_distribution(&self, image: &ImageBuffer) -> Result<EmotionDistribution>;

    fn predict_top1(&self, image: &ImageBuffer) -> Result<(EmotionLabel, f64)> {
        Ok(self.predict_distribution(image)?.top1())
    }

    fn saliency(&self, image: &ImageBuffer, class: EmotionLabel) -> Result<SaliencyMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub input_side: usize,
    /// Output channels of each conv block. Every block but the last is
    /// followed by 2x2 average pooling.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            input_side: 64,
            channels: vec![8, 16, 32, 32],
            seed: 17,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config(
                "predictor needs at least one conv block to act as the saliency layer".into(),
            ));
        }
        let pools = self.channels.len() - 1;
        let side = self.input_side >> pools;
        if side < 2 || self.input_side % (1 << pools) != 0 {
            return Err(Error::Config(format!(
                "input side {} leaves a {}x{} saliency layer after {} poolings",
                self.input_side, side, side, pools
            )));
        }
        Ok(())
    }

    pub fn feature_side(&self) -> usize {
        self.input_side >> (self.channels.len() - 1)
    }
}

pub struct PredictorModel {
    config: PredictorConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl PredictorModel {
    pub fn new(config: PredictorConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed, dtype);
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            convs.push(params.conv2d(&format!("block{i}"), in_ch, out_ch, 3, 1, 1)?);
            in_ch = out_ch;
        }
        let head = params.linear("head", in_ch, NUM_EMOTIONS)?;
        Ok(Self {
            config,
            params,
            convs,
            head,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// NCHW input tensor from images, pixel values mapped to [-0.5, 0.5].
    pub fn input_tensor(&self, images: &[&ImageBuffer]) -> Result<Tensor> {
        let side = self.config.input_side;
        let mut data = Vec::with_capacity(images.len() * 3 * side * side);
        for img in images {
            if img.height() != side || img.width() != side {
                return Err(Error::Shape(format!(
                    "predictor expects {side}x{side} images, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend(img.to_chw(-0.5, 0.5));
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, side, side), &Device::Cpu)?
            .to_dtype(self.params.dtype())?)
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let feats = self.feature_maps(input)?;
        self.head(&feats)
    }

    /// Global-average-pooled features feeding the classification head.
    pub fn embedding(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.feature_maps(input)?.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, input: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let logits = self.logits(input)?;
        Ok(candle_nn::loss::cross_entropy(&logits, labels)?)
    }

    pub fn image_embedding(&self, image: &ImageBuffer) -> Result<Vec<f64>> {
        let x = self.input_tensor(&[image])?;
        to_f64_vec(&self.embedding(&x)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.params.tensors(""))?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let config: PredictorConfig = ckpt.config()?;
        let model = Self::new(config, DType::F32)?;
        model.params.load(&ckpt.tensors, "")?;
        Ok(model)
    }
}

impl CamModel for PredictorModel {
    fn feature_maps(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?.relu()?;
            if i < last {
                x = x.avg_pool2d(2)?;
            }
        }
        Ok(x)
    }

    fn head(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = features.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }
}

impl EmotionPredictor for PredictorModel {
    fn predict_distribution(&self, image: &ImageBuffer) -> Result<EmotionDistribution> {
        let x = self.input_tensor(&[image])?;
        let logits = to_f64_vec(&self.logits(&x)?)?;
        EmotionDistribution::from_logits(&logits)
    }

    fn saliency(&self, image: &ImageBuffer, class: EmotionLabel) -> Result<SaliencyMap> {
        let x = self.input_tensor(&[image])?;
        grad_cam(self, &x, class.index())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorTrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub examples: usize,
}

/// Fails when a class has no examples, naming the first missing class.
pub fn check_class_coverage(labels: impl IntoIterator<Item = EmotionLabel>) -> Result<()> {
    let mut seen = [false; NUM_EMOTIONS];
    for l in labels {
        seen[l.index()] = true;
    }
    match EmotionLabel::ALL.into_iter().find(|e| !seen[e.index()]) {
        Some(missing) => Err(Error::MissingClass(missing.name().to_string())),
        None => Ok(()),
    }
}

pub fn train_predictor(
    corpus: &[(ImageBuffer, EmotionLabel)],
    model_config: PredictorConfig,
    config: &PredictorTrainConfig,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    check_class_coverage(corpus.iter().map(|(_, l)| *l))?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let model = PredictorModel::new(model_config, DType::F32)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = rng_from(config.seed, 11);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<&ImageBuffer> = chunk.iter().map(|&i| &corpus[i].0).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| corpus[i].1.index() as u32).collect();
            let x = model.input_tensor(&imgs)?;
            let y = Tensor::new(labels.as_slice(), &Device::Cpu)?;
            let loss = model.loss(&x, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: "classifier".into(),
                });
            }
            let grads = loss.backward()?;
            opt.step(&[("", model.params())], &grads)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("predictor epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let train_accuracy = accuracy(&model, corpus)?;
    info!("predictor train accuracy {train_accuracy:.3}");
    Ok((
        model,
        PredictorTrainReport {
            epoch_losses,
            train_accuracy,
            examples: corpus.len(),
        },
    ))
}

pub fn accuracy(model: &impl EmotionPredictor, corpus: &[(ImageBuffer, EmotionLabel)]) -> Result<f64> {
    let mut hits = 0;
    for (img, label) in corpus {
        if model.predict_top1(img)?.0 == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_vec;

    fn tiny() -> PredictorModel {
        PredictorModel::new(
            PredictorConfig {
                input_side: 8,
                channels: vec![4],
                seed: 3,
            },
            DType::F64,
        )
        .unwrap()
    }

    #[test]
    fn config_requires_a_saliency_layer() {
        let cfg = PredictorConfig {
            channels: vec![],
            ..Default::default()
        };
        assert!(matches!(PredictorModel::new(cfg, DType::F32), Err(Error::Config(_))));
        let cfg = PredictorConfig {
            input_side: 8,
            channels: vec![2, 2, 2, 2],
            seed: 0,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_class_is_named() {
        let img = ImageBuffer::filled(8, 8, [0, 0, 0]);
        let corpus: Vec<_> = EmotionLabel::ALL
            .into_iter()
            .filter(|e| *e != EmotionLabel::Awe)
            .map(|e| (img.clone(), e))
            .collect();
        let err = train_predictor(&corpus, PredictorConfig::default(), &Default::default())
            .err()
            .unwrap();
        assert!(matches!(err, Error::MissingClass(ref n) if n == "awe"));
        assert!(err.to_string().contains("awe"));
    }

    #[test]
    fn prediction_shape_guard_and_determinism() {
        let m = tiny();
        let wrong = ImageBuffer::filled(9, 9, [1, 1, 1]);
        assert!(matches!(m.predict_distribution(&wrong), Err(Error::Shape(_))));
        let mut img = ImageBuffer::filled(8, 8, [10, 200, 30]);
        img.set(3, 3, [255, 0, 0]);
        let a = m.predict_distribution(&img).unwrap();
        let b = m.predict_distribution(&img).unwrap();
        assert_eq!(a, b);
        let s: f64 = a.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    /// Classifier loss gradient against central finite differences, f64.
    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let m = tiny();
        let mut rng = rng_from(5, 0);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 8 * 8), (2, 3, 8, 8), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let y = Tensor::new(&[2u32, 6], &Device::Cpu).unwrap();
        let loss = m.loss(&x, &y).unwrap();
        let grads = loss.backward().unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (name, var) in m.params().vars() {
            let analytic = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
            let base = to_f64_vec(var.as_tensor()).unwrap();
            for idx in (0..base.len()).step_by(3) {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                    let l = m.loss(&x, &y).unwrap().to_scalar::<f64>().unwrap();
                    l
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
                let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
                assert!(
                    (fd - analytic[idx]).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd {fd} vs analytic {}",
                    analytic[idx]
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
