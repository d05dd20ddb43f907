//! Paired-data curation: annotating existing edit pairs with predicted
//! emotions, generating new pairs from an instruction bank through an
//! editor, and quality filtering the generated candidates.

mod bank;
mod editor;
mod perceptual;

pub use bank::{
    build_instruction_bank, default_bank, default_candidates, read_ranked_file, InstructionBank,
    RankedInstruction, Rankings, RawInstructions, RETAINED_PER_EMOTION,
};
pub use editor::{EditRequest, IdentityEditor, ImageEditor, SyntheticEditor};
pub use perceptual::{PerceptualDistance, PredictorFeatureDistance};

use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::domain::{EditPair, EmotionLabel, ImageBuffer, PairRecord, SubsetTag};
use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::nn::rng_from;
use crate::predictor::EmotionPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterCriteria {
    pub min_confidence: f64,
    pub ssim_low: f64,
    pub ssim_high: f64,
    pub lpips_min: f64,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            min_confidence: 0.90,
            ssim_low: 0.3,
            ssim_high: 0.6,
            lpips_min: 0.1,
        }
    }
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.ssim_low
            && self.ssim_low < self.ssim_high
            && self.ssim_high < 1.0
            && 0.0 < self.min_confidence
            && self.min_confidence < 1.0
            && self.lpips_min >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid filter criteria {self:?}")))
        }
    }
}

/// Measured quantities a candidate is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub predicted: EmotionLabel,
    pub confidence: f64,
    pub target: EmotionLabel,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOutcome {
    Accepted,
    RejectedByConfidence,
    RejectedBySsim,
    RejectedByPerceptual,
}

/// First failing check, in the order confidence, SSIM, perceptual.
/// All inequalities are strict.
pub fn judge(scores: &CandidateScores, criteria: &FilterCriteria) -> FilterOutcome {
    if scores.predicted != scores.target || scores.confidence <= criteria.min_confidence {
        FilterOutcome::RejectedByConfidence
    } else if !(criteria.ssim_low < scores.ssim && scores.ssim < criteria.ssim_high) {
        FilterOutcome::RejectedBySsim
    } else if scores.perceptual <= criteria.lpips_min {
        FilterOutcome::RejectedByPerceptual
    } else {
        FilterOutcome::Accepted
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub candidates_in: usize,
    pub rejected_by_confidence: usize,
    pub rejected_by_ssim: usize,
    pub rejected_by_lpips: usize,
    pub accepted: usize,
}

impl CurationReport {
    pub fn record(&mut self, outcome: FilterOutcome) {
        self.candidates_in += 1;
        match outcome {
            FilterOutcome::Accepted => self.accepted += 1,
            FilterOutcome::RejectedByConfidence => self.rejected_by_confidence += 1,
            FilterOutcome::RejectedBySsim => self.rejected_by_ssim += 1,
            FilterOutcome::RejectedByPerceptual => self.rejected_by_lpips += 1,
        }
    }

    pub fn merge(&self, other: &CurationReport) -> CurationReport {
        CurationReport {
            candidates_in: self.candidates_in + other.candidates_in,
            rejected_by_confidence: self.rejected_by_confidence + other.rejected_by_confidence,
            rejected_by_ssim: self.rejected_by_ssim + other.rejected_by_ssim,
            rejected_by_lpips: self.rejected_by_lpips + other.rejected_by_lpips,
            accepted: self.accepted + other.accepted,
        }
    }

    pub fn reconciles(&self) -> bool {
        self.accepted + self.rejected_by_confidence + self.rejected_by_ssim + self.rejected_by_lpips
            == self.candidates_in
    }
}

/// Applies the filter to pre-scored candidates. Returns the indices of the
/// accepted ones and the attribution report.
pub fn filter_scored(scores: &[CandidateScores], criteria: &FilterCriteria) -> (Vec<usize>, CurationReport) {
    let mut report = CurationReport::default();
    let mut accepted = Vec::new();
    for (i, s) in scores.iter().enumerate() {
        let outcome = judge(s, criteria);
        report.record(outcome);
        if outcome == FilterOutcome::Accepted {
            accepted.push(i);
        }
    }
    (accepted, report)
}

/// A generated (source, edited) pair awaiting the quality filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source_index: usize,
    pub source_emotion: EmotionLabel,
    pub target_emotion: EmotionLabel,
    pub instruction: String,
    pub image: ImageBuffer,
    pub provenance: String,
}

pub fn score_candidate(
    source: &ImageBuffer,
    candidate: &Candidate,
    predictor: &dyn EmotionPredictor,
    perceptual: &dyn PerceptualDistance,
) -> Result<CandidateScores> {
    let (predicted, confidence) = predictor.predict_top1(&candidate.image)?;
    Ok(CandidateScores {
        predicted,
        confidence,
        target: candidate.target_emotion,
        ssim: ssim(source, &candidate.image)?,
        perceptual: perceptual.distance(source, &candidate.image)?,
    })
}

/// Scores and filters candidates against their sources. Accepted indices
/// refer to `candidates`.
pub fn filter_candidates(
    sources: &[ImageBuffer],
    candidates: &[Candidate],
    predictor: &dyn EmotionPredictor,
    criteria: &FilterCriteria,
    perceptual: &dyn PerceptualDistance,
) -> Result<(Vec<usize>, Vec<CandidateScores>, CurationReport)> {
    criteria.validate()?;
    let scores = candidates
        .iter()
        .map(|c| score_candidate(&sources[c.source_index], c, predictor, perceptual))
        .collect::<Result<Vec<_>>>()?;
    let (accepted, report) = filter_scored(&scores, criteria);
    Ok((accepted, scores, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    CrossValence,
    AllOthers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub targets: TargetPolicy,
    pub instructions_per_target: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            targets: TargetPolicy::CrossValence,
            instructions_per_target: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempted: usize,
    pub editor_failures: usize,
}

/// Runs the editor over every (source, target emotion, sampled instruction)
/// triple. Editor failures are skipped and counted.
pub fn generate_candidates(
    sources: &[(ImageBuffer, EmotionLabel)],
    bank: &InstructionBank,
    editor: &dyn ImageEditor,
    config: &GenerateConfig,
) -> (Vec<Candidate>, GenerationStats) {
    let mut out = Vec::new();
    let mut stats = GenerationStats::default();
    for (si, (image, source_emotion)) in sources.iter().enumerate() {
        let targets: Vec<EmotionLabel> = match config.targets {
            TargetPolicy::CrossValence => source_emotion.cross_valence_targets().collect(),
            TargetPolicy::AllOthers => EmotionLabel::ALL
                .into_iter()
                .filter(|e| e != source_emotion)
                .collect(),
        };
        for target in targets {
            let pool = bank.instructions(target);
            let k = config.instructions_per_target.min(pool.len());
            let mut rng = rng_from(config.seed, ((si as u64) << 8) | target.index() as u64);
            let mut picks = sample(&mut rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            for pi in picks {
                let instruction = &pool[pi].text;
                stats.attempted += 1;
                let request = EditRequest {
                    instruction,
                    target,
                };
                match editor.edit(image, &request) {
                    Ok(edited) => out.push(Candidate {
                        source_index: si,
                        source_emotion: *source_emotion,
                        target_emotion: target,
                        instruction: instruction.clone(),
                        image: edited,
                        provenance: format!("editor={};rank={}", editor.id(), pool[pi].rank),
                    }),
                    Err(e) => {
                        warn!("editor failed on source {si} -> {target}: {e}");
                        stats.editor_failures += 1;
                    }
                }
            }
        }
    }
    (out, stats)
}

/// Labels both sides of each edit pair with the predictor's top-1 class.
/// Pairs whose images cannot be read are skipped and returned with the
/// reason, keyed by input index.
pub fn annotate_pairs(
    pairs: &[EditPair],
    base: &Path,
    predictor: &dyn EmotionPredictor,
) -> Result<(Vec<PairRecord>, Vec<(usize, String)>)> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let loaded = ImageBuffer::load(&base.join(&pair.source_path))
            .and_then(|s| ImageBuffer::load(&base.join(&pair.target_path)).map(|t| (s, t)));
        let (source, target) = match loaded {
            Ok(v) => v,
            Err(e) => {
                warn!("skipping pair {i}: {e}");
                skipped.push((i, e.to_string()));
                continue;
            }
        };
        let (source_emotion, _) = predictor.predict_top1(&source)?;
        let (target_emotion, _) = predictor.predict_top1(&target)?;
        records.push(PairRecord {
            source_path: pair.source_path.clone(),
            target_path: pair.target_path.clone(),
            source_emotion,
            target_emotion,
            instruction: pair.instruction.clone(),
            subset_tag: SubsetTag::Annotated,
            provenance: "annotated".into(),
        });
    }
    Ok((records, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EmotionDistribution;
    use crate::predictor::SaliencyMap;

    fn scores(conf: f64, ssim: f64, perc: f64) -> CandidateScores {
        CandidateScores {
            predicted: EmotionLabel::Awe,
            confidence: conf,
            target: EmotionLabel::Awe,
            ssim,
            perceptual: perc,
        }
    }

    #[test]
    fn printed_example_accepted() {
        let c = FilterCriteria::default();
        assert_eq!(judge(&scores(0.95, 0.45, 0.3), &c), FilterOutcome::Accepted);
    }

    #[test]
    fn strict_bounds() {
        let c = FilterCriteria::default();
        assert_eq!(judge(&scores(0.90, 0.45, 0.3), &c), FilterOutcome::RejectedByConfidence);
        assert_eq!(judge(&scores(0.95, 0.3, 0.3), &c), FilterOutcome::RejectedBySsim);
        assert_eq!(judge(&scores(0.95, 0.6, 0.3), &c), FilterOutcome::RejectedBySsim);
        assert_eq!(judge(&scores(0.95, 1.0, 0.0), &c), FilterOutcome::RejectedBySsim);
        assert_eq!(judge(&scores(0.95, 0.45, 0.1), &c), FilterOutcome::RejectedByPerceptual);
        let mut wrong = scores(0.99, 0.45, 0.3);
        wrong.predicted = EmotionLabel::Fear;
        assert_eq!(judge(&wrong, &c), FilterOutcome::RejectedByConfidence);
    }

    #[test]
    fn criteria_validation() {
        assert!(FilterCriteria::default().validate().is_ok());
        let bad = FilterCriteria {
            ssim_low: 0.7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    struct Fixed(EmotionLabel);

    impl EmotionPredictor for Fixed {
        fn predict_distribution(&self, _image: &ImageBuffer) -> Result<EmotionDistribution> {
            let mut p = [0.0; 8];
            p[self.0.index()] = 0.9;
            p[(self.0.index() + 1) % 8] = 0.1;
            EmotionDistribution::new(&p)
        }
        fn saliency(&self, image: &ImageBuffer, _c: EmotionLabel) -> Result<SaliencyMap> {
            SaliencyMap::new(image.height(), image.width(), vec![0.0; image.height() * image.width()])
        }
    }

    struct Zero;
    impl PerceptualDistance for Zero {
        fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
            Ok(if a == b { 0.0 } else { 0.5 })
        }
    }

    #[test]
    fn counting_and_identity_editor() {
        let src = crate::synth::synth_image(EmotionLabel::Fear, 0, 32, 3, 0.0);
        let bank = default_bank(1);
        let cfg = GenerateConfig {
            targets: TargetPolicy::CrossValence,
            instructions_per_target: 10,
            seed: 1,
        };
        let one_target: Vec<_> = vec![(src.clone(), EmotionLabel::Fear)];
        let (cands, stats) = generate_candidates(&one_target, &bank, &IdentityEditor, &cfg);
        assert_eq!(stats.attempted, 4 * 10);
        assert_eq!(cands.len(), 40);
        assert!(cands.iter().all(|c| c.target_emotion.valence() != EmotionLabel::Fear.valence()));
        assert!(cands.iter().all(|c| c.provenance.contains("identity")));
        // identity edits always fail the structural window (SSIM = 1) and
        // carry zero perceptual distance
        let (accepted, _, report) = filter_candidates(
            &[src],
            &cands,
            &Fixed(EmotionLabel::Awe),
            &FilterCriteria {
                min_confidence: 0.5,
                ..Default::default()
            },
            &Zero,
        )
        .unwrap();
        assert!(accepted.is_empty());
        assert!(report.reconciles());
        assert_eq!(report.candidates_in, 40);
    }

    struct Failing;
    impl ImageEditor for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn edit(&self, image: &ImageBuffer, r: &EditRequest<'_>) -> Result<ImageBuffer> {
            if r.target == EmotionLabel::Anger {
                Err(Error::Editor("boom".into()))
            } else {
                Ok(image.clone())
            }
        }
    }

    #[test]
    fn editor_failures_are_counted() {
        let src = ImageBuffer::filled(16, 16, [1, 2, 3]);
        let cfg = GenerateConfig {
            instructions_per_target: 2,
            ..Default::default()
        };
        let (c, stats) = generate_candidates(&[(src, EmotionLabel::Awe)], &default_bank(1), &Failing, &cfg);
        assert_eq!(stats.editor_failures, 2);
        assert_eq!(c.len(), 6);
    }

    #[test]
    fn annotate_skips_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::filled(16, 16, [5, 5, 5]);
        let mut pairs = Vec::new();
        for i in 0..10 {
            let s = format!("s{i}.png");
            let t = format!("t{i}.png");
            img.save(&dir.path().join(&s)).unwrap();
            img.save(&dir.path().join(&t)).unwrap();
            pairs.push(EditPair {
                source_path: s.into(),
                target_path: t.into(),
                instruction: "make it sad".into(),
            });
        }
        let bad = dir.path().join("t3.png");
        let bytes = std::fs::read(&bad).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        let (records, skipped) = annotate_pairs(&pairs, dir.path(), &Fixed(EmotionLabel::Sadness)).unwrap();
        assert_eq!(records.len(), 9);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].0, 3);
        assert!(records.iter().all(|r| r.target_emotion == EmotionLabel::Sadness
            && r.subset_tag == SubsetTag::Annotated));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_scores() -> impl Strategy<Value = CandidateScores> {
            (0.0f64..1.0, -0.2f64..1.0, 0.0f64..1.0, any::<bool>()).prop_map(|(c, s, p, hit)| CandidateScores {
                predicted: if hit { EmotionLabel::Awe } else { EmotionLabel::Fear },
                confidence: c,
                target: EmotionLabel::Awe,
                ssim: s,
                perceptual: p,
            })
        }

        proptest! {
            #[test]
            fn report_always_reconciles(s in proptest::collection::vec(arb_scores(), 0..40)) {
                let (acc, rep) = filter_scored(&s, &FilterCriteria::default());
                prop_assert!(rep.reconciles());
                prop_assert_eq!(rep.accepted, acc.len());
                prop_assert_eq!(rep.candidates_in, s.len());
            }
        }
    }
}
