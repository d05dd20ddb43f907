//! Emotion and structure metrics: EMR, ESR, ENRD, ESS, plus the SSIM and
//! Canny kernels they rely on.

pub mod canny;
pub mod ssim;

pub use canny::{canny_edges, EdgeMap, DEFAULT_HIGH as CANNY_HIGH, DEFAULT_LOW as CANNY_LOW};
pub use ssim::ssim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::manifest::{manifest_base, read_jsonl};
use crate::domain::{EmotionLabel, ImageBuffer};
use crate::error::{Error, Result};
use crate::predictor::{EmotionPredictor, DEFAULT_SALIENCY_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub saliency_threshold: f64,
    pub canny_low: f64,
    pub canny_high: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            saliency_threshold: DEFAULT_SALIENCY_THRESHOLD,
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.saliency_threshold) {
            return Err(Error::Config(format!(
                "saliency threshold {} must lie in [0,1]",
                self.saliency_threshold
            )));
        }
        if !(self.canny_low > 0.0 && self.canny_low < self.canny_high) {
            return Err(Error::Config(format!(
                "Canny thresholds need 0 < low < high, got {} and {}",
                self.canny_low, self.canny_high
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTriple {
    pub source: ImageBuffer,
    pub generated: ImageBuffer,
    pub target_emotion: EmotionLabel,
}

impl EvalTriple {
    pub fn new(source: ImageBuffer, generated: ImageBuffer, target_emotion: EmotionLabel) -> Result<Self> {
        source.ensure_same_dims(&generated)?;
        Ok(Self {
            source,
            generated,
            target_emotion,
        })
    }
}

/// On-disk triple reference, one per line of a triples manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub source_path: PathBuf,
    pub generated_path: PathBuf,
    pub target_emotion: EmotionLabel,
}

fn non_empty<T>(items: &[T]) -> Result<()> {
    if items.is_empty() {
        Err(Error::InvalidValue("metric needs a non-empty batch".into()))
    } else {
        Ok(())
    }
}

pub fn emr_hit(triple: &EvalTriple, predictor: &dyn EmotionPredictor) -> Result<bool> {
    Ok(predictor.predict_top1(&triple.generated)?.0 == triple.target_emotion)
}

/// With KL measured from the one-hot target, KL(onehot || d) = -log d[target],
/// so the generated image counts when its target probability is strictly
/// higher than the source's.
pub fn esr_hit(triple: &EvalTriple, predictor: &dyn EmotionPredictor) -> Result<bool> {
    let g = predictor.predict_distribution(&triple.generated)?;
    let s = predictor.predict_distribution(&triple.source)?;
    Ok(g.prob(triple.target_emotion) > s.prob(triple.target_emotion))
}

pub fn emr(triples: &[EvalTriple], predictor: &dyn EmotionPredictor) -> Result<f64> {
    non_empty(triples)?;
    let mut hits = 0;
    for t in triples {
        hits += usize::from(emr_hit(t, predictor)?);
    }
    Ok(hits as f64 / triples.len() as f64)
}

pub fn esr(triples: &[EvalTriple], predictor: &dyn EmotionPredictor) -> Result<f64> {
    non_empty(triples)?;
    let mut hits = 0;
    for t in triples {
        hits += usize::from(esr_hit(t, predictor)?);
    }
    Ok(hits as f64 / triples.len() as f64)
}

/// Mean absolute channel difference over pixels where `mask` is 0.
/// `None` when every pixel is masked.
pub fn enrd_masked(source: &ImageBuffer, generated: &ImageBuffer, mask: &[u8]) -> Result<Option<f64>> {
    source.ensure_same_dims(generated)?;
    if mask.len() != source.height() * source.width() {
        return Err(Error::Shape("mask does not match image".into()));
    }
    let mut total = 0u64;
    let mut count = 0u64;
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            continue;
        }
        for c in 0..3 {
            total += source.pixels()[i * 3 + c].abs_diff(generated.pixels()[i * 3 + c]) as u64;
        }
        count += 3;
    }
    Ok((count > 0).then(|| total as f64 / count as f64))
}

/// Emotion-neutral region deviation. The saliency map is taken for the
/// source image's own top-1 class.
pub fn enrd(triple: &EvalTriple, predictor: &dyn EmotionPredictor) -> Result<Option<f64>> {
    enrd_with(triple, predictor, DEFAULT_SALIENCY_THRESHOLD)
}

pub fn enrd_with(triple: &EvalTriple, predictor: &dyn EmotionPredictor, threshold: f64) -> Result<Option<f64>> {
    let (class, _) = predictor.predict_top1(&triple.source)?;
    let map = predictor.saliency(&triple.source, class)?;
    let mask = map.binarize(threshold);
    enrd_masked(&triple.source, &triple.generated, &mask)
}

/// 100 x mean absolute difference of the binary Canny maps.
pub fn ess(triple: &EvalTriple) -> Result<f64> {
    ess_images(&triple.source, &triple.generated)
}

pub fn ess_images(source: &ImageBuffer, generated: &ImageBuffer) -> Result<f64> {
    ess_with(source, generated, CANNY_LOW, CANNY_HIGH)
}

pub fn ess_with(source: &ImageBuffer, generated: &ImageBuffer, low: f64, high: f64) -> Result<f64> {
    source.ensure_same_dims(generated)?;
    let a = canny_edges(source, low, high)?;
    let b = canny_edges(generated, low, high)?;
    let diff: usize = a.edges.iter().zip(&b.edges).map(|(x, y)| x.abs_diff(*y) as usize).sum();
    Ok(100.0 * diff as f64 / a.edges.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub index: usize,
    pub target_emotion: EmotionLabel,
    pub predicted: EmotionLabel,
    pub emr_hit: bool,
    pub esr_hit: bool,
    pub enrd: Option<f64>,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub emr: f64,
    pub esr: f64,
    pub enrd: f64,
    pub ess: f64,
    pub n: usize,
    pub enrd_missing: usize,
    pub unreadable: usize,
    pub per_item: Vec<ItemMetrics>,
}

pub fn item_metrics(
    index: usize,
    triple: &EvalTriple,
    predictor: &dyn EmotionPredictor,
    cfg: &MetricsConfig,
) -> Result<ItemMetrics> {
    let (predicted, _) = predictor.predict_top1(&triple.generated)?;
    Ok(ItemMetrics {
        index,
        target_emotion: triple.target_emotion,
        predicted,
        emr_hit: predicted == triple.target_emotion,
        esr_hit: esr_hit(triple, predictor)?,
        enrd: enrd_with(triple, predictor, cfg.saliency_threshold)?,
        ess: ess_with(&triple.source, &triple.generated, cfg.canny_low, cfg.canny_high)?,
    })
}

impl MetricReport {
    pub fn from_items(per_item: Vec<ItemMetrics>, unreadable: usize) -> Result<Self> {
        non_empty(&per_item)?;
        let n = per_item.len();
        let emr = per_item.iter().filter(|r| r.emr_hit).count() as f64 / n as f64;
        let esr = per_item.iter().filter(|r| r.esr_hit).count() as f64 / n as f64;
        let enrd_vals: Vec<f64> = per_item.iter().filter_map(|r| r.enrd).collect();
        let enrd = if enrd_vals.is_empty() {
            f64::NAN
        } else {
            enrd_vals.iter().sum::<f64>() / enrd_vals.len() as f64
        };
        let ess = per_item.iter().map(|r| r.ess).sum::<f64>() / n as f64;
        Ok(Self {
            emr,
            esr,
            enrd,
            ess,
            n,
            enrd_missing: n - enrd_vals.len(),
            unreadable,
            per_item,
        })
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "", "EMR(%)", "ESR(%)", "ENRD", "ESS");
        let _ = writeln!(
            s,
            "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            "result",
            self.emr * 100.0,
            self.esr * 100.0,
            self.enrd,
            self.ess
        );
        let _ = writeln!(
            s,
            "n = {}, enrd missing = {}, unreadable = {}",
            self.n, self.enrd_missing, self.unreadable
        );
        s
    }
}

pub fn evaluate_triples(
    triples: &[EvalTriple],
    predictor: &dyn EmotionPredictor,
    cfg: &MetricsConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    let items = triples
        .iter()
        .enumerate()
        .map(|(i, t)| item_metrics(i, t, predictor, cfg))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_items(items, 0)
}

/// Evaluates a triples manifest. Items whose images cannot be read are
/// logged, excluded and counted in `unreadable`.
pub fn evaluate_batch(manifest: &Path, predictor: &dyn EmotionPredictor, cfg: &MetricsConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let records: Vec<TripleRecord> = read_jsonl(manifest)?;
    let base = manifest_base(manifest);
    let mut items = Vec::new();
    let mut unreadable = 0;
    for (i, r) in records.iter().enumerate() {
        let loaded = ImageBuffer::load(&base.join(&r.source_path))
            .and_then(|s| ImageBuffer::load(&base.join(&r.generated_path)).map(|g| (s, g)))
            .and_then(|(s, g)| EvalTriple::new(s, g, r.target_emotion));
        match loaded {
            Ok(t) => items.push(item_metrics(i, &t, predictor, cfg)?),
            Err(e) => {
                warn!("excluding triple {}: {e}", i + 1);
                unreadable += 1;
            }
        }
    }
    MetricReport::from_items(items, unreadable)
}
