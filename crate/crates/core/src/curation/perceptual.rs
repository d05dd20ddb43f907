use crate::domain::ImageBuffer;
use crate::error::Result;
use crate::predictor::PredictorModel;

/// Symmetric perceptual distance, zero on identical images.
pub trait PerceptualDistance: Sync {
    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64>;
}

/// Half the L2 distance between unit-normalized penultimate-layer features
/// of the emotion predictor. Ranges over [0,1].
pub struct PredictorFeatureDistance<'a> {
    pub model: &'a PredictorModel,
}

pub(crate) fn normalized_feature_distance(fa: &[f64], fb: &[f64]) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        } else {
            vec![0.0; v.len()]
        }
    };
    let (ua, ub) = (unit(fa), unit(fb));
    let d2: f64 = ua.iter().zip(&ub).map(|(x, y)| (x - y) * (x - y)).sum();
    (0.5 * d2.sqrt()).clamp(0.0, 1.0)
}

impl PerceptualDistance for PredictorFeatureDistance<'_> {
    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        a.ensure_same_dims(b)?;
        if a == b {
            return Ok(0.0);
        }
        let fa = self.model.image_embedding(a)?;
        let fb = self.model.image_embedding(b)?;
        Ok(normalized_feature_distance(&fa, &fb))
    }
}
