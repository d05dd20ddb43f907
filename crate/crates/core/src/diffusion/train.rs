//! Joint training of the emotion encoder and the denoiser.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::info;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::encoders::{select_rows, EmotionEncoder, EmotionEncoderConfig, TextEncoder, TextEncoderConfig};
use super::loss::{alignment_loss_tensor, noise_loss, LossBreakdown, DEFAULT_LAMBDA};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{Denoiser, DenoiserConfig};
use crate::checkpoint::Checkpoint;
use crate::domain::{EmotionLabel, ImageBuffer, PairRecord};
use crate::error::{Error, Result};
use crate::nn::{normal_vec, rng_from, tensor_from_f32, Adam};

const EDITOR_KIND: &str = "emotion-editor";
const STATE_KIND: &str = "editor-train-state";
pub const DEFAULT_CONDITION_DROPOUT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub schedule: ScheduleConfig,
    pub lambda: f64,
    pub condition_dropout: f64,
    pub text: TextEncoderConfig,
    pub emotion: EmotionEncoderConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            lambda: DEFAULT_LAMBDA,
            condition_dropout: DEFAULT_CONDITION_DROPOUT,
            text: TextEncoderConfig::default(),
            emotion: EmotionEncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config(format!(
                "condition dropout must lie in [0,1], got {}",
                self.condition_dropout
            )));
        }
        let w = self.emotion.width;
        if self.text.width != w || self.denoiser.context_width != w {
            return Err(Error::Config(format!(
                "embedding widths disagree: emotion {w}, text {}, denoiser context {}",
                self.text.width, self.denoiser.context_width
            )));
        }
        NoiseSchedule::new(self.schedule)?;
        self.denoiser.validate()
    }
}

/// Everything the editor needs at train and inference time except the
/// codec, which is referenced by fingerprint.
pub struct EditorNets {
    pub config: EditorConfig,
    pub schedule: NoiseSchedule,
    pub text: TextEncoder,
    pub emotion: EmotionEncoder,
    pub denoiser: Denoiser,
    pub codec_fingerprint: String,
    /// Where the codec checkpoint lives, relative to the editor checkpoint
    /// unless absolute.
    pub codec_path: Option<PathBuf>,
}

impl EditorNets {
    pub fn new(config: EditorConfig, codec_fingerprint: &str, dtype: DType) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: NoiseSchedule::new(config.schedule)?,
            text: TextEncoder::new(config.text.clone(), dtype)?,
            emotion: EmotionEncoder::new(config.emotion.clone(), dtype)?,
            denoiser: Denoiser::new(config.denoiser.clone(), dtype)?,
            codec_fingerprint: codec_fingerprint.to_string(),
            codec_path: None,
            config,
        })
    }

    /// Fails unless the codec matches the one used in training and its
    /// latent shape fits the denoiser.
    pub fn check_codec(&self, codec: &LatentCodec) -> Result<()> {
        let (c, h, w) = codec.latent_dims();
        let d = &self.config.denoiser;
        if c != d.latent_channels || h != d.latent_side || w != d.latent_side {
            return Err(Error::Config(format!(
                "codec latents {c}x{h}x{w} do not fit denoiser {}x{}x{}",
                d.latent_channels, d.latent_side, d.latent_side
            )));
        }
        let fp = codec.fingerprint()?;
        if fp != self.codec_fingerprint {
            return Err(Error::Checkpoint(format!(
                "editor was trained against codec {} but {} was supplied",
                self.codec_fingerprint, fp
            )));
        }
        Ok(())
    }

    fn weight_tensors(&self) -> std::collections::HashMap<String, Tensor> {
        let mut t = self.emotion.params().tensors("tau.");
        t.extend(self.denoiser.params().tensors("eps."));
        t
    }

    fn load_weights(&self, ckpt: &Checkpoint) -> Result<()> {
        self.emotion.params().load(&ckpt.tensors, "tau.")?;
        self.denoiser.params().load(&ckpt.tensors, "eps.")
    }

    fn header_extra(&self, step: u64) -> serde_json::Value {
        serde_json::json!({
            "codec_fingerprint": self.codec_fingerprint,
            "codec_path": self.codec_path,
            "text_encoder_checksum": self.text.params().checksum().unwrap_or_default(),
            "step": step,
        })
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let mut ckpt = Checkpoint::new(EDITOR_KIND, &self.config, self.weight_tensors())?;
        ckpt.header.extra = self.header_extra(step);
        ckpt.save(path)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: EditorConfig = ckpt.config()?;
        let fp = ckpt
            .header
            .extra
            .get("codec_fingerprint")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("editor checkpoint lacks a codec reference".into()))?
            .to_string();
        let mut nets = Self::new(config, &fp, DType::F32)?;
        nets.codec_path = serde_json::from_value(ckpt.header.extra.get("codec_path").cloned().unwrap_or_default())?;
        if let Some(sum) = ckpt.header.extra.get("text_encoder_checksum").and_then(|v| v.as_str()) {
            if sum != nets.text.params().checksum()? {
                return Err(Error::Checkpoint("text encoder does not match the one used in training".into()));
            }
        }
        nets.load_weights(ckpt)?;
        Ok(nets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, EDITOR_KIND)?)
    }

    /// Loads the codec referenced by an editor checkpoint at `editor_path`.
    pub fn load_codec(&self, editor_path: &Path) -> Result<LatentCodec> {
        let rel = self
            .codec_path
            .as_ref()
            .ok_or_else(|| Error::Config("editor checkpoint does not record a codec path; pass one explicitly".into()))?;
        let path = editor_path.parent().unwrap_or(Path::new(".")).join(rel);
        let codec = LatentCodec::load(&path)?;
        self.check_codec(&codec)?;
        Ok(codec)
    }
}

/// A training pair with its latents precomputed by the frozen codec.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub source_latent: Tensor,
    pub target_latent: Tensor,
    pub target_emotion: EmotionLabel,
    pub instruction: String,
}

pub fn prepare_examples(records: &[PairRecord], base: &Path, codec: &LatentCodec) -> Result<Vec<TrainExample>> {
    if records.is_empty() {
        return Err(Error::InvalidValue("editor training corpus is empty".into()));
    }
    records
        .iter()
        .map(|r| {
            let s = ImageBuffer::load(&base.join(&r.source_path))?;
            let t = ImageBuffer::load(&base.join(&r.target_path))?;
            Ok(TrainExample {
                source_latent: codec.encode(&s)?,
                target_latent: codec.encode(&t)?,
                target_emotion: r.target_emotion,
                instruction: r.instruction.clone(),
            })
        })
        .collect()
}

/// The random draws of one training step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    pub drop_emotion: Vec<bool>,
    pub drop_image: Vec<bool>,
}

pub fn sample_step_noise(
    rng: &mut ChaCha8Rng,
    schedule: &NoiseSchedule,
    latent_dims: (usize, usize, usize, usize),
    dropout: f64,
    dtype: DType,
) -> Result<StepNoise> {
    let (b, c, h, w) = latent_dims;
    let timesteps = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = tensor_from_f32(normal_vec(rng, b * c * h * w), &[b, c, h, w], dtype)?;
    let drop_emotion = (0..b).map(|_| rng.random::<f64>() < dropout).collect();
    let drop_image = (0..b).map(|_| rng.random::<f64>() < dropout).collect();
    Ok(StepNoise {
        timesteps,
        eps,
        drop_emotion,
        drop_image,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Differentiable total loss of a batch under fixed noise draws.
pub fn batch_loss(nets: &EditorNets, batch: &[&TrainExample], noise: &StepNoise) -> Result<(Tensor, LossBreakdown)> {
    let dtype = nets.denoiser.params().dtype();
    let z0 = Tensor::cat(&batch.iter().map(|e| &e.target_latent).collect::<Vec<_>>(), 0)?.to_dtype(dtype)?;
    let zc = Tensor::cat(&batch.iter().map(|e| &e.source_latent).collect::<Vec<_>>(), 0)?.to_dtype(dtype)?;
    let zc = select_rows(&noise.drop_image, &zc, &zc.zeros_like()?)?;
    let labels: Vec<EmotionLabel> = batch.iter().map(|e| e.target_emotion).collect();
    let e = nets.emotion.forward(&nets.emotion.one_hot_batch(&labels)?)?;
    let context = select_rows(&noise.drop_emotion, &e, nets.emotion.null_embedding())?.unsqueeze(1)?;
    let texts: Vec<&str> = batch.iter().map(|e| e.instruction.as_str()).collect();
    let c = nets.text.encode_batch(&texts)?;
    let z_t = nets.schedule.add_noise_batch(&z0, &noise.timesteps, &noise.eps)?;
    let pred = nets.denoiser.forward(&z_t, &noise.timesteps, &zc, &context)?;
    let ln = noise_loss(&pred, &noise.eps)?;
    let la = alignment_loss_tensor(&e, &c)?;
    let (vn, va) = (scalar(&ln)?, scalar(&la)?);
    if !vn.is_finite() {
        return Err(Error::NonFinite {
            component: "noise".into(),
        });
    }
    if !va.is_finite() {
        return Err(Error::NonFinite {
            component: "alignment".into(),
        });
    }
    let lambda = nets.config.lambda;
    let total = (ln + (la * lambda)?)?;
    Ok((total, LossBreakdown::new(vn, va, lambda)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for EditorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 77,
            checkpoint_every: 500,
        }
    }
}

/// Optimizer loop state. Every step draws from its own RNG stream keyed by
/// the step index, so a resumed run continues exactly where it stopped.
pub struct EditorTrainer {
    pub nets: EditorNets,
    pub config: EditorTrainConfig,
    opt: Adam,
    losses: Vec<LossBreakdown>,
}

impl EditorTrainer {
    pub fn new(nets: EditorNets, config: EditorTrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let opt = Adam::new(config.learning_rate);
        Ok(Self {
            nets,
            config,
            opt,
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.opt.steps_taken()
    }

    pub fn losses(&self) -> &[LossBreakdown] {
        &self.losses
    }

    pub fn train_step(&mut self, examples: &[TrainExample]) -> Result<LossBreakdown> {
        if examples.is_empty() {
            return Err(Error::InvalidValue("editor training corpus is empty".into()));
        }
        let step = self.opt.steps_taken();
        let mut rng = rng_from(self.config.seed, step);
        let b = self.config.batch_size.min(examples.len());
        let idx = sample(&mut rng, examples.len(), b).into_vec();
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let noise = sample_step_noise(
            &mut rng,
            &self.nets.schedule,
            self.nets.denoiser.latent_dims(b),
            self.nets.config.condition_dropout,
            self.nets.denoiser.params().dtype(),
        )?;
        let (total, breakdown) = batch_loss(&self.nets, &batch, &noise)?;
        let grads = total.backward()?;
        self.opt.step(
            &[("tau.", self.nets.emotion.params()), ("eps.", self.nets.denoiser.params())],
            &grads,
        )?;
        self.losses.push(breakdown);
        Ok(breakdown)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut tensors = self.nets.weight_tensors();
        tensors.extend(self.opt.state_tensors()?);
        let mut ckpt = Checkpoint::new(STATE_KIND, &self.nets.config, tensors)?;
        let mut extra = self.nets.header_extra(self.step_count());
        extra["train"] = serde_json::to_value(&self.config)?;
        extra["losses"] = serde_json::to_value(&self.losses)?;
        ckpt.header.extra = extra;
        ckpt.save(path)
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path, STATE_KIND)?;
        let nets = EditorNets::from_checkpoint(&ckpt)?;
        let config: EditorTrainConfig = serde_json::from_value(
            ckpt.header
                .extra
                .get("train")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("training state lacks its config".into()))?,
        )?;
        let losses = serde_json::from_value(ckpt.header.extra.get("losses").cloned().unwrap_or_default())?;
        let mut trainer = Self::new(nets, config)?;
        trainer.opt.load_state(&ckpt.tensors)?;
        trainer.losses = losses;
        Ok(trainer)
    }
}

/// Paths written by [`train_editor`].
pub fn editor_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("editor.ckpt"),
        out_dir.join("train_state.ckpt"),
        out_dir.join("loss_curve.json"),
    )
}

/// Trains until `train.steps`, resuming from `out_dir/train_state.ckpt`
/// when present. Writes the editor checkpoint, training state and loss
/// curve every `checkpoint_every` steps and at the end.
pub fn train_editor(
    records: &[PairRecord],
    base: &Path,
    codec: &LatentCodec,
    config: &EditorConfig,
    train: &EditorTrainConfig,
    out_dir: &Path,
    codec_path: Option<&Path>,
) -> Result<EditorTrainer> {
    let examples = prepare_examples(records, base, codec)?;
    let (editor_path, state_path, curve_path) = editor_paths(out_dir);
    let mut trainer = if state_path.exists() {
        let t = EditorTrainer::load_state(&state_path)?;
        if &t.nets.config != config {
            return Err(Error::Config(format!(
                "{} was written with a different editor configuration",
                state_path.display()
            )));
        }
        t.nets.check_codec(codec)?;
        info!("resuming editor training at step {}", t.step_count());
        let mut t = t;
        t.config = train.clone();
        t
    } else {
        let mut nets = EditorNets::new(config.clone(), &codec.fingerprint()?, DType::F32)?;
        nets.codec_path = codec_path.map(Path::to_path_buf);
        nets.check_codec(codec)?;
        EditorTrainer::new(nets, train.clone())?
    };
    let every = train.checkpoint_every.max(1);
    let write = |t: &EditorTrainer| -> Result<()> {
        t.nets.save(&editor_path, t.step_count())?;
        t.save_state(&state_path)?;
        crate::domain::manifest::write_atomic(&curve_path, &serde_json::to_vec_pretty(t.losses())?)
    };
    while trainer.step_count() < train.steps {
        let b = trainer.train_step(&examples)?;
        let step = trainer.step_count();
        if step % 100 == 0 {
            info!(
                "editor step {step}: total {:.4} noise {:.4} align {:.4}",
                b.total, b.noise_loss, b.alignment_loss
            );
        }
        if step % every == 0 {
            write(&trainer)?;
        }
    }
    write(&trainer)?;
    Ok(trainer)
}

/// Trailing moving average of total loss.
pub fn smoothed(losses: &[LossBreakdown], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, l) in losses.iter().enumerate() {
        acc += l.total;
        if i >= w {
            acc -= losses[i - w].total;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, ParamStore};

    pub(crate) fn tiny_config() -> EditorConfig {
        EditorConfig {
            schedule: ScheduleConfig::default(),
            lambda: DEFAULT_LAMBDA,
            condition_dropout: DEFAULT_CONDITION_DROPOUT,
            text: TextEncoderConfig {
                buckets: 32,
                width: 4,
                seed: 1,
            },
            emotion: EmotionEncoderConfig {
                hidden: 4,
                width: 4,
                seed: 2,
            },
            denoiser: DenoiserConfig {
                latent_channels: 2,
                latent_side: 4,
                channels: [4, 8],
                context_width: 4,
                seed: 3,
            },
        }
    }

    fn examples(n: usize, dtype: DType) -> Vec<TrainExample> {
        let mut rng = rng_from(5, 5);
        (0..n)
            .map(|i| TrainExample {
                source_latent: tensor_from_f32(normal_vec(&mut rng, 32), &[1, 2, 4, 4], dtype).unwrap(),
                target_latent: tensor_from_f32(normal_vec(&mut rng, 32), &[1, 2, 4, 4], dtype).unwrap(),
                target_emotion: EmotionLabel::ALL[i % 8],
                instruction: format!("make it feel {} number {i}", EmotionLabel::ALL[i % 8]),
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.text.width = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.condition_dropout = 1.5;
        assert!(c.validate().is_err());
    }

    fn perturbed_loss(nets: &EditorNets, batch: &[&TrainExample], noise: &StepNoise, store: &ParamStore, name: &str, idx: usize, h: f64) -> f64 {
        let var = store.get(name).unwrap();
        let orig = var.as_tensor().copy().unwrap();
        let mut vals = to_f64_vec(&orig).unwrap();
        vals[idx] += h;
        var.set(&Tensor::from_vec(vals, orig.shape(), orig.device()).unwrap()).unwrap();
        let l = batch_loss(nets, batch, noise).unwrap().1.total;
        var.set(&orig).unwrap();
        l
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let nets = EditorNets::new(tiny_config(), "none", DType::F64).unwrap();
        let ex = examples(3, DType::F64);
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let mut rng = rng_from(8, 8);
        let mut noise = sample_step_noise(&mut rng, &nets.schedule, (3, 2, 4, 4), 0.0, DType::F64).unwrap();
        noise.timesteps = vec![20, 400, 900];
        noise.drop_emotion = vec![false, true, false];
        let (total, _) = batch_loss(&nets, &batch, &noise).unwrap();
        let grads = total.backward().unwrap();
        let store = nets.emotion.params();
        let h = 1e-6;
        let mut checked = 0;
        for (name, var) in store.vars() {
            let g = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
            for (i, &a) in g.iter().enumerate() {
                let up = perturbed_loss(&nets, &batch, &noise, store, name, i, h);
                let down = perturbed_loss(&nets, &batch, &noise, store, name, i, -h);
                let n = (up - down) / (2.0 * h);
                let scale = a.abs().max(n.abs());
                assert!(
                    (a - n).abs() <= 1e-3 * scale + 1e-9,
                    "{name}[{i}]: analytic {a} vs numeric {n}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, store.num_scalars());
    }

    #[test]
    fn one_step_updates_both_networks() {
        let nets = EditorNets::new(tiny_config(), "none", DType::F32).unwrap();
        let ex = examples(4, DType::F32);
        let before_tau = nets.emotion.params().checksum().unwrap();
        let before_eps = nets.denoiser.params().checksum().unwrap();
        let before_text = nets.text.params().checksum().unwrap();
        let mut tr = EditorTrainer::new(nets, EditorTrainConfig::default()).unwrap();
        let b = tr.train_step(&ex).unwrap();
        assert_eq!(b.total, b.noise_loss + 0.5 * b.alignment_loss);
        assert!((0.0..=2.0).contains(&b.alignment_loss));
        assert_ne!(tr.nets.emotion.params().checksum().unwrap(), before_tau);
        assert_ne!(tr.nets.denoiser.params().checksum().unwrap(), before_eps);
        assert_eq!(tr.nets.text.params().checksum().unwrap(), before_text);
        assert!(tr.train_step(&[]).is_err());
    }

    #[test]
    fn resume_reproduces_next_loss_bit_for_bit() {
        let ex = examples(6, DType::F32);
        let cfg = EditorTrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        let mut straight = EditorTrainer::new(EditorNets::new(tiny_config(), "none", DType::F32).unwrap(), cfg.clone()).unwrap();
        for _ in 0..3 {
            straight.train_step(&ex).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        straight.save_state(&path).unwrap();
        let next = straight.train_step(&ex).unwrap();

        let mut resumed = EditorTrainer::load_state(&path).unwrap();
        assert_eq!(resumed.step_count(), 3);
        assert_eq!(resumed.losses().len(), 3);
        let again = resumed.train_step(&ex).unwrap();
        assert_eq!(next.total.to_bits(), again.total.to_bits());
    }

    #[test]
    fn dropout_rate_is_binomial() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let mut drops = [0usize; 2];
        let n = 10_000;
        for step in 0..n {
            let mut rng = rng_from(1, step);
            let noise = sample_step_noise(&mut rng, &s, (1, 1, 1, 1), 0.05, DType::F32).unwrap();
            drops[0] += usize::from(noise.drop_emotion[0]);
            drops[1] += usize::from(noise.drop_image[0]);
            assert!((1..=1000).contains(&noise.timesteps[0]));
        }
        // 95% interval for Binomial(10000, 0.05): 500 +- 1.96 * sqrt(475)
        let half = 1.96 * (n as f64 * 0.05 * 0.95).sqrt();
        for d in drops {
            assert!(((d as f64) - 500.0).abs() <= half, "{d} drops");
        }
    }

    #[test]
    fn smoothing() {
        let l: Vec<LossBreakdown> = [4.0, 2.0, 0.0, 2.0].iter().map(|&v| LossBreakdown::new(v, 0.0, 0.5)).collect();
        assert_eq!(smoothed(&l, 2), vec![4.0, 3.0, 1.0, 1.0]);
    }
}
