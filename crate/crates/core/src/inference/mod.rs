//! Guided sampling and the critic loop that accepts, retries or falls back.

mod sampler;

pub use sampler::{ddim_timesteps, sample_edit, sample_latent, SamplerConfig};

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::diffusion::{EditorNets, LatentCodec};
use crate::domain::manifest::{read_jsonl, write_atomic, write_jsonl};
use crate::domain::{EmotionLabel, ImageBuffer};
use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::predictor::EmotionPredictor;

pub const MAX_ITERATIONS: usize = 20;
pub const CRITIC_SSIM_LOW: f64 = 0.3;
pub const CRITIC_SSIM_HIGH: f64 = 0.8;
pub const CRITIC_CONFIDENCE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticCriteria {
    pub ssim_low: f64,
    pub ssim_high: f64,
    pub min_confidence: f64,
    /// Hard-capped at 20.
    pub max_iterations: usize,
}

impl Default for CriticCriteria {
    fn default() -> Self {
        Self {
            ssim_low: CRITIC_SSIM_LOW,
            ssim_high: CRITIC_SSIM_HIGH,
            min_confidence: CRITIC_CONFIDENCE,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

impl CriticCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.ssim_low && self.ssim_low <= self.ssim_high && self.ssim_high <= 1.0) {
            return Err(Error::Config(format!(
                "critic SSIM window {}..{} must lie within [0,1]",
                self.ssim_low, self.ssim_high
            )));
        }
        if !(0.0..1.0).contains(&self.min_confidence) {
            return Err(Error::Config(format!("critic confidence {} must lie in [0,1)", self.min_confidence)));
        }
        if self.max_iterations == 0 || self.max_iterations > MAX_ITERATIONS {
            return Err(Error::Config(format!(
                "critic iterations {} outside 1..={MAX_ITERATIONS}",
                self.max_iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub ssim: f64,
    pub predicted: EmotionLabel,
    pub confidence: f64,
    /// Predicted probability of the target class, used for the fallback.
    pub target_confidence: f64,
    pub pass: bool,
}

impl CriticVerdict {
    /// Default criteria: SSIM window inclusive, confidence strict.
    pub fn new(ssim: f64, predicted: EmotionLabel, confidence: f64, target: EmotionLabel, target_confidence: f64) -> Self {
        Self::judge(&CriticCriteria::default(), ssim, predicted, confidence, target, target_confidence)
    }

    pub fn judge(
        criteria: &CriticCriteria,
        ssim: f64,
        predicted: EmotionLabel,
        confidence: f64,
        target: EmotionLabel,
        target_confidence: f64,
    ) -> Self {
        let pass = (criteria.ssim_low..=criteria.ssim_high).contains(&ssim)
            && predicted == target
            && confidence > criteria.min_confidence;
        Self {
            ssim,
            predicted,
            confidence,
            target_confidence,
            pass,
        }
    }
}

pub fn critic_evaluate(
    candidate: &ImageBuffer,
    source: &ImageBuffer,
    target: EmotionLabel,
    predictor: &dyn EmotionPredictor,
) -> Result<CriticVerdict> {
    critic_evaluate_with(&CriticCriteria::default(), candidate, source, target, predictor)
}

pub fn critic_evaluate_with(
    criteria: &CriticCriteria,
    candidate: &ImageBuffer,
    source: &ImageBuffer,
    target: EmotionLabel,
    predictor: &dyn EmotionPredictor,
) -> Result<CriticVerdict> {
    candidate.ensure_same_dims(source)?;
    let s = ssim(candidate, source)?;
    let dist = predictor.predict_distribution(candidate)?;
    let (predicted, confidence) = dist.top1();
    Ok(CriticVerdict::judge(criteria, s, predicted, confidence, target, dist.prob(target)))
}

/// Produces the candidate for one critic iteration (1-based).
pub trait CandidateGenerator {
    fn generate(
        &self,
        source: &ImageBuffer,
        previous: Option<&ImageBuffer>,
        target: EmotionLabel,
        iteration: usize,
    ) -> Result<ImageBuffer>;
}

pub trait Critic {
    fn evaluate(&self, candidate: &ImageBuffer, source: &ImageBuffer, target: EmotionLabel) -> Result<CriticVerdict>;
}

/// Iteration 1 starts from the source; later iterations from the previous
/// output. The source stays the condition throughout. Iteration k uses RNG
/// stream k of the sampler seed.
pub struct DiffusionGenerator<'a> {
    pub nets: &'a EditorNets,
    pub codec: &'a LatentCodec,
    pub config: SamplerConfig,
}

impl CandidateGenerator for DiffusionGenerator<'_> {
    fn generate(
        &self,
        source: &ImageBuffer,
        previous: Option<&ImageBuffer>,
        target: EmotionLabel,
        iteration: usize,
    ) -> Result<ImageBuffer> {
        let input = previous.unwrap_or(source);
        sample_edit(self.nets, self.codec, input, source, target, &self.config, iteration as u64)
    }
}

pub struct PredictorCritic<'a> {
    pub predictor: &'a dyn EmotionPredictor,
    pub criteria: CriticCriteria,
}

impl Critic for PredictorCritic<'_> {
    fn evaluate(&self, candidate: &ImageBuffer, source: &ImageBuffer, target: EmotionLabel) -> Result<CriticVerdict> {
        critic_evaluate_with(&self.criteria, candidate, source, target, self.predictor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CriteriaMet,
    IterationCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iteration {
    pub image: ImageBuffer,
    pub verdict: CriticVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    pub source: ImageBuffer,
    pub target_emotion: EmotionLabel,
    pub iterations: Vec<Iteration>,
    /// 0-based index into `iterations` of the returned image.
    pub final_index: usize,
    pub stop_reason: StopReason,
}

impl EditSession {
    pub fn final_image(&self) -> &ImageBuffer {
        &self.iterations[self.final_index].image
    }

    pub fn final_verdict(&self) -> &CriticVerdict {
        &self.iterations[self.final_index].verdict
    }
}

/// Index of the highest target confidence, earliest on ties.
pub fn fallback_index(verdicts: &[CriticVerdict]) -> usize {
    let mut best = 0;
    for (i, v) in verdicts.iter().enumerate() {
        if v.target_confidence > verdicts[best].target_confidence {
            best = i;
        }
    }
    best
}

/// Generates and critiques up to `max_iterations` candidates (never more
/// than 20), stopping at the first pass.
pub fn run_critic_loop(
    source: &ImageBuffer,
    target: EmotionLabel,
    generator: &dyn CandidateGenerator,
    critic: &dyn Critic,
    max_iterations: usize,
) -> Result<EditSession> {
    let cap = max_iterations.clamp(1, MAX_ITERATIONS);
    let mut iterations: Vec<Iteration> = Vec::new();
    for k in 1..=cap {
        let previous = iterations.last().map(|it| &it.image);
        let image = generator.generate(source, previous, target, k)?;
        let verdict = critic.evaluate(&image, source, target)?;
        info!(
            "iteration {k}: ssim {:.3} predicted {} ({:.3}) pass {}",
            verdict.ssim, verdict.predicted, verdict.confidence, verdict.pass
        );
        let pass = verdict.pass;
        iterations.push(Iteration { image, verdict });
        if pass {
            return Ok(EditSession {
                source: source.clone(),
                target_emotion: target,
                final_index: k - 1,
                iterations,
                stop_reason: StopReason::CriteriaMet,
            });
        }
    }
    let verdicts: Vec<CriticVerdict> = iterations.iter().map(|it| it.verdict).collect();
    Ok(EditSession {
        source: source.clone(),
        target_emotion: target,
        final_index: fallback_index(&verdicts),
        iterations,
        stop_reason: StopReason::IterationCap,
    })
}

pub fn iterative_edit(
    source: &ImageBuffer,
    target: EmotionLabel,
    nets: &EditorNets,
    codec: &LatentCodec,
    predictor: &dyn EmotionPredictor,
    cfg: &SamplerConfig,
) -> Result<EditSession> {
    iterative_edit_with(source, target, nets, codec, predictor, cfg, &CriticCriteria::default())
}

pub fn iterative_edit_with(
    source: &ImageBuffer,
    target: EmotionLabel,
    nets: &EditorNets,
    codec: &LatentCodec,
    predictor: &dyn EmotionPredictor,
    cfg: &SamplerConfig,
    criteria: &CriticCriteria,
) -> Result<EditSession> {
    criteria.validate()?;
    let generator = DiffusionGenerator {
        nets,
        codec,
        config: cfg.clone(),
    };
    let critic = PredictorCritic {
        predictor,
        criteria: *criteria,
    };
    run_critic_loop(source, target, &generator, &critic, criteria.max_iterations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VerdictRecord {
    iteration: usize,
    image: String,
    #[serde(flatten)]
    verdict: CriticVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub target_emotion: EmotionLabel,
    pub stop_reason: StopReason,
    pub final_iteration: usize,
    pub iterations: usize,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub critic: CriticCriteria,
}

/// Writes `source.png`, `iter_NN.png` per iteration, `final.png`,
/// `verdicts.jsonl` and `session.json` into `dir`.
pub fn save_session(session: &EditSession, sampler: &SamplerConfig, critic: &CriticCriteria, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    session.source.save(&dir.join("source.png"))?;
    let mut records = Vec::new();
    for (i, it) in session.iterations.iter().enumerate() {
        let name = format!("iter_{:02}.png", i + 1);
        it.image.save(&dir.join(&name))?;
        records.push(VerdictRecord {
            iteration: i + 1,
            image: name,
            verdict: it.verdict,
        });
    }
    session.final_image().save(&dir.join("final.png"))?;
    write_jsonl(&dir.join("verdicts.jsonl"), &records)?;
    let meta = SessionMeta {
        target_emotion: session.target_emotion,
        stop_reason: session.stop_reason,
        final_iteration: session.final_index + 1,
        iterations: session.iterations.len(),
        sampler: sampler.clone(),
        critic: *critic,
    };
    write_atomic(&dir.join("session.json"), &serde_json::to_vec_pretty(&meta)?)
}

pub fn load_session(dir: &Path) -> Result<(EditSession, SessionMeta)> {
    let meta_path = dir.join("session.json");
    let meta: SessionMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let records: Vec<VerdictRecord> = read_jsonl(&dir.join("verdicts.jsonl"))?;
    if records.len() != meta.iterations || meta.final_iteration == 0 || meta.final_iteration > records.len() {
        return Err(Error::Validation(format!("session in {} is inconsistent", dir.display())));
    }
    let iterations = records
        .iter()
        .map(|r| {
            Ok(Iteration {
                image: ImageBuffer::load(&dir.join(&r.image))?,
                verdict: r.verdict,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EditSession {
            source: ImageBuffer::load(&dir.join("source.png"))?,
            target_emotion: meta.target_emotion,
            iterations,
            final_index: meta.final_iteration - 1,
            stop_reason: meta.stop_reason,
        },
        meta,
    ))
}

/// Re-runs a persisted session with its stored sampler settings and checks
/// that every image comes out identical.
pub fn replay_session(
    dir: &Path,
    nets: &EditorNets,
    codec: &LatentCodec,
    predictor: &dyn EmotionPredictor,
) -> Result<EditSession> {
    let (stored, meta) = load_session(dir)?;
    let fresh = iterative_edit_with(
        &stored.source,
        stored.target_emotion,
        nets,
        codec,
        predictor,
        &meta.sampler,
        &meta.critic,
    )?;
    if fresh.iterations.len() != stored.iterations.len()
        || fresh
            .iterations
            .iter()
            .zip(&stored.iterations)
            .any(|(a, b)| a.image != b.image)
    {
        return Err(Error::Validation(format!(
            "replay of {} diverged from the recorded images",
            dir.display()
        )));
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct Counter;

    impl CandidateGenerator for Counter {
        fn generate(&self, source: &ImageBuffer, _p: Option<&ImageBuffer>, _t: EmotionLabel, k: usize) -> Result<ImageBuffer> {
            let mut img = source.clone();
            img.pixels_mut()[0] = k as u8;
            Ok(img)
        }
    }

    struct Scripted {
        pass_at: Option<usize>,
        confidences: Vec<f64>,
        calls: RefCell<usize>,
    }

    impl Critic for Scripted {
        fn evaluate(&self, _c: &ImageBuffer, _s: &ImageBuffer, target: EmotionLabel) -> Result<CriticVerdict> {
            let mut n = self.calls.borrow_mut();
            *n += 1;
            let pass = self.pass_at == Some(*n);
            let tc = self.confidences.get(*n - 1).copied().unwrap_or(0.0);
            Ok(CriticVerdict {
                ssim: 0.5,
                predicted: target,
                confidence: tc,
                target_confidence: tc,
                pass,
            })
        }
    }

    fn scripted(pass_at: Option<usize>, confidences: Vec<f64>) -> Scripted {
        Scripted {
            pass_at,
            confidences,
            calls: RefCell::new(0),
        }
    }

    #[test]
    fn verdict_rules() {
        let t = EmotionLabel::Awe;
        assert!(CriticVerdict::new(0.5, t, 0.95, t, 0.95).pass);
        assert!(!CriticVerdict::new(0.5, t, 0.8, t, 0.8).pass);
        assert!(CriticVerdict::new(0.3, t, 0.81, t, 0.81).pass);
        assert!(CriticVerdict::new(0.8, t, 0.81, t, 0.81).pass);
        assert!(!CriticVerdict::new(1.0, t, 0.99, t, 0.99).pass);
        assert!(!CriticVerdict::new(0.5, EmotionLabel::Fear, 0.99, t, 0.0).pass);
    }

    #[test]
    fn loop_stops_on_pass_or_cap() {
        let src = ImageBuffer::filled(4, 4, [9, 9, 9]);
        let t = EmotionLabel::Sadness;
        let s = run_critic_loop(&src, t, &Counter, &scripted(Some(1), vec![]), 20).unwrap();
        assert_eq!((s.iterations.len(), s.stop_reason), (1, StopReason::CriteriaMet));
        let s = run_critic_loop(&src, t, &Counter, &scripted(Some(3), vec![]), 20).unwrap();
        assert_eq!((s.iterations.len(), s.final_index), (3, 2));
        assert_eq!(s.final_image().pixels()[0], 3);
        let mut conf = vec![0.1; 20];
        conf[6] = 0.7;
        conf[13] = 0.7;
        let s = run_critic_loop(&src, t, &Counter, &scripted(None, conf), 20).unwrap();
        assert_eq!((s.iterations.len(), s.stop_reason, s.final_index), (20, StopReason::IterationCap, 6));
        let s = run_critic_loop(&src, t, &Counter, &scripted(None, vec![]), 500).unwrap();
        assert_eq!(s.iterations.len(), 20);
    }

    #[test]
    fn session_round_trip() {
        let src = ImageBuffer::filled(4, 4, [9, 9, 9]);
        let s = run_critic_loop(&src, EmotionLabel::Fear, &Counter, &scripted(Some(2), vec![]), 20).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_session(&s, &SamplerConfig::default(), &CriticCriteria::default(), dir.path()).unwrap();
        let (back, meta) = load_session(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta.sampler, SamplerConfig::default());
        assert_eq!(meta.final_iteration, 2);
        assert!(dir.path().join("final.png").exists());
    }
}
