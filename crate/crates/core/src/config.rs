//! Run-level configuration: one TOML document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{FilterCriteria, TargetPolicy};
use crate::diffusion::{
    CodecConfig, CodecTrainConfig, DenoiserConfig, EditorConfig, EditorTrainConfig, EmotionEncoderConfig,
    ScheduleConfig, TextEncoderConfig, DEFAULT_CONDITION_DROPOUT, DEFAULT_EMBED_WIDTH, DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};
use crate::inference::{CriticCriteria, SamplerConfig};
use crate::metrics::MetricsConfig;
use crate::predictor::{PredictorConfig, PredictorTrainConfig};
use crate::synth::SynthConfig;

pub const ARTIFACT_ROOT_ENV: &str = "EMOEDIT_ARTIFACT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub per_class: usize,
    pub motif_swap_prob: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            per_class: d.per_class,
            motif_swap_prob: d.motif_swap_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            channels: PredictorConfig::default().channels,
            epochs: 4,
            learning_rate: PredictorTrainConfig::default().learning_rate,
            batch_size: PredictorTrainConfig::default().batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub latent_channels: usize,
    pub encoder_channels: [usize; 3],
    pub decoder_channels: [usize; 3],
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Train on every n-th corpus image.
    pub image_stride: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        let m = CodecConfig::default();
        let t = CodecTrainConfig::default();
        Self {
            latent_channels: m.latent_channels,
            encoder_channels: m.encoder_channels,
            decoder_channels: m.decoder_channels,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            image_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSection {
    pub criteria: FilterCriteria,
    pub targets: TargetPolicy,
    pub instructions_per_target: usize,
    /// Every n-th corpus image becomes a generation source.
    pub source_stride: usize,
    /// Ranked instruction file; the built-in bank is used when absent.
    pub bank_file: Option<PathBuf>,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self {
            criteria: FilterCriteria::default(),
            targets: TargetPolicy::CrossValence,
            instructions_per_target: 3,
            source_stride: 10,
            bank_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorSection {
    pub schedule: ScheduleConfig,
    pub lambda: f64,
    pub condition_dropout: f64,
    pub embed_width: usize,
    pub denoiser_channels: [usize; 2],
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: u64,
    /// Curated pairs used for editor training.
    pub max_pairs: usize,
    pub max_pairs_per_source: usize,
}

impl Default for EditorSection {
    fn default() -> Self {
        let t = EditorTrainConfig::default();
        Self {
            schedule: ScheduleConfig::default(),
            lambda: DEFAULT_LAMBDA,
            condition_dropout: DEFAULT_CONDITION_DROPOUT,
            embed_width: DEFAULT_EMBED_WIDTH,
            denoiser_channels: DenoiserConfig::default().channels,
            steps: 1000,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            checkpoint_every: t.checkpoint_every,
            max_pairs: 64,
            max_pairs_per_source: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_image: f64,
    pub guidance_emotion: f64,
    pub strength: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            steps: d.steps,
            guidance_image: d.guidance_image,
            guidance_emotion: d.guidance_emotion,
            strength: d.strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Held-in training sources edited at the end of a run.
    pub sources: usize,
    pub metrics: MetricsConfig,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            sources: 32,
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub image_side: usize,
    pub artifact_root: PathBuf,
    pub synth: SynthSection,
    pub predictor: PredictorSection,
    pub codec: CodecSection,
    pub curation: CurationSection,
    pub editor: EditorSection,
    pub sampler: SamplerSection,
    pub critic: CriticCriteria,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            image_side: 64,
            artifact_root: PathBuf::from("artifacts"),
            synth: SynthSection::default(),
            predictor: PredictorSection::default(),
            codec: CodecSection::default(),
            curation: CurationSection::default(),
            editor: EditorSection::default(),
            sampler: SamplerSection::default(),
            critic: CriticCriteria::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

/// Stage seeds are derived from the run seed so one number controls a run.
fn derive(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the artifact-root environment override.
    pub fn with_env(mut self) -> Self {
        if let Some(root) = std::env::var_os(ARTIFACT_ROOT_ENV) {
            if !root.is_empty() {
                self.artifact_root = PathBuf::from(root);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 8 != 0 {
            return Err(Error::Config(format!("image side {} must be a positive multiple of 8", self.image_side)));
        }
        if self.synth.per_class == 0 {
            return Err(Error::Config("synth.per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.motif_swap_prob) {
            return Err(Error::Config("synth.motif_swap_prob must lie in [0,1]".into()));
        }
        for (name, v) in [
            ("codec.image_stride", self.codec.image_stride),
            ("curation.source_stride", self.curation.source_stride),
            ("curation.instructions_per_target", self.curation.instructions_per_target),
            ("editor.max_pairs", self.editor.max_pairs),
            ("editor.max_pairs_per_source", self.editor.max_pairs_per_source),
            ("evaluate.sources", self.evaluate.sources),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.predictor_config().validate()?;
        self.codec_config().validate()?;
        self.curation.criteria.validate()?;
        self.editor_config().validate()?;
        self.sampler_config().validate(self.editor.schedule.steps)?;
        self.critic.validate()?;
        self.evaluate.metrics.validate()?;
        let latent = self.codec_config().latent_side();
        if latent % 2 != 0 {
            return Err(Error::Config(format!("latent side {latent} must be even")));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            per_class: self.synth.per_class,
            side: self.image_side,
            seed: self.seed,
            motif_swap_prob: self.synth.motif_swap_prob,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            input_side: self.image_side,
            channels: self.predictor.channels.clone(),
            seed: derive(self.seed, 1),
        }
    }

    pub fn predictor_train_config(&self) -> PredictorTrainConfig {
        PredictorTrainConfig {
            epochs: self.predictor.epochs,
            learning_rate: self.predictor.learning_rate,
            batch_size: self.predictor.batch_size,
            seed: derive(self.seed, 2),
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            image_side: self.image_side,
            latent_channels: self.codec.latent_channels,
            encoder_channels: self.codec.encoder_channels,
            decoder_channels: self.codec.decoder_channels,
            seed: derive(self.seed, 3),
        }
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            epochs: self.codec.epochs,
            learning_rate: self.codec.learning_rate,
            batch_size: self.codec.batch_size,
            seed: derive(self.seed, 4),
        }
    }

    pub fn editor_config(&self) -> EditorConfig {
        let w = self.editor.embed_width;
        EditorConfig {
            schedule: self.editor.schedule,
            lambda: self.editor.lambda,
            condition_dropout: self.editor.condition_dropout,
            text: TextEncoderConfig {
                width: w,
                seed: derive(self.seed, 5),
                ..TextEncoderConfig::default()
            },
            emotion: EmotionEncoderConfig {
                hidden: w,
                width: w,
                seed: derive(self.seed, 6),
            },
            denoiser: DenoiserConfig {
                latent_channels: self.codec.latent_channels,
                latent_side: self.image_side / 8,
                channels: self.editor.denoiser_channels,
                context_width: w,
                seed: derive(self.seed, 7),
            },
        }
    }

    pub fn editor_train_config(&self) -> EditorTrainConfig {
        EditorTrainConfig {
            steps: self.editor.steps,
            batch_size: self.editor.batch_size,
            learning_rate: self.editor.learning_rate,
            seed: derive(self.seed, 8),
            checkpoint_every: self.editor.checkpoint_every,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            guidance_image: self.sampler.guidance_image,
            guidance_emotion: self.sampler.guidance_emotion,
            strength: self.sampler.strength,
            seed: derive(self.seed, 9),
        }
    }

    pub fn generation_seed(&self) -> u64 {
        derive(self.seed, 10)
    }

    pub fn bank_seed(&self) -> u64 {
        derive(self.seed, 11)
    }
}
