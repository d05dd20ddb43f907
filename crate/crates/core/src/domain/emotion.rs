//! The eight-category emotion taxonomy and the vector forms derived from it.
//!
//! The index order below is part of every serialized vector and checkpoint:
//! positive block first, alphabetical inside each valence block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_EMOTIONS: usize = 8;

/// Tolerance on the sum of an [`EmotionDistribution`].
pub const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_EMOTIONS] = [
        EmotionLabel::Amusement,
        EmotionLabel::Awe,
        EmotionLabel::Contentment,
        EmotionLabel::Excitement,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidValue(format!("emotion index {index} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Amusement => "amusement",
            EmotionLabel::Awe => "awe",
            EmotionLabel::Contentment => "contentment",
            EmotionLabel::Excitement => "excitement",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Sadness => "sadness",
        }
    }

    pub fn valence(self) -> Valence {
        if self.index() < 4 {
            Valence::Positive
        } else {
            Valence::Negative
        }
    }

    /// Emotions of the opposite valence, in index order.
    pub fn cross_valence_targets(self) -> impl Iterator<Item = EmotionLabel> {
        let v = self.valence();
        Self::ALL.into_iter().filter(move |e| e.valence() != v)
    }

    pub fn one_hot(self) -> EmotionOneHot {
        let mut vector = [0u8; NUM_EMOTIONS];
        vector[self.index()] = 1;
        EmotionOneHot { vector }
    }
}

pub fn valence_of(label: EmotionLabel) -> Valence {
    label.valence()
}

pub fn one_hot_encode(label: EmotionLabel) -> EmotionOneHot {
    label.one_hot()
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::InvalidValue(format!("unknown emotion `{s}`")))
    }
}

/// Short digest of the category order, embedded in checkpoints so that
/// models trained under a different ordering are refused at load time.
pub fn class_order_hash() -> String {
    let joined = EmotionLabel::ALL.map(|e| e.name()).join(",");
    let digest = Sha256::digest(joined.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmotionOneHot {
    vector: [u8; NUM_EMOTIONS],
}

impl EmotionOneHot {
    /// Accepts only vectors with entries in {0,1} summing to exactly 1.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != NUM_EMOTIONS {
            return Err(Error::Shape(format!(
                "one-hot vector must have {NUM_EMOTIONS} entries, got {}",
                values.len()
            )));
        }
        let mut vector = [0u8; NUM_EMOTIONS];
        for (slot, &v) in vector.iter_mut().zip(values) {
            *slot = match v {
                v if v == 0.0 => 0,
                v if v == 1.0 => 1,
                other => {
                    return Err(Error::InvalidValue(format!(
                        "one-hot entries must be 0 or 1, got {other}"
                    )))
                }
            };
        }
        if vector.iter().map(|&v| v as u32).sum::<u32>() != 1 {
            return Err(Error::InvalidValue(
                "one-hot vector must contain exactly one 1".into(),
            ));
        }
        Ok(Self { vector })
    }

    pub fn as_array(&self) -> [u8; NUM_EMOTIONS] {
        self.vector
    }

    pub fn to_f32(&self) -> [f32; NUM_EMOTIONS] {
        self.vector.map(f32::from)
    }

    pub fn decode(&self) -> EmotionLabel {
        let idx = self.vector.iter().position(|&v| v == 1).unwrap_or(0);
        EmotionLabel::ALL[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmotionDistribution {
    probs: [f64; NUM_EMOTIONS],
}

impl EmotionDistribution {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.len() != NUM_EMOTIONS {
            return Err(Error::Shape(format!(
                "distribution must have {NUM_EMOTIONS} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidValue(format!(
                "distribution entries must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
            return Err(Error::InvalidValue(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        let mut arr = [0.0; NUM_EMOTIONS];
        arr.copy_from_slice(probs);
        Ok(Self { probs: arr })
    }

    /// Numerically stable softmax over raw class scores.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                component: "classifier logit".into(),
            });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        Self::new(&probs)
    }

    pub fn probs(&self) -> &[f64; NUM_EMOTIONS] {
        &self.probs
    }

    pub fn prob(&self, label: EmotionLabel) -> f64 {
        self.probs[label.index()]
    }

    /// Arg-max with ties resolved towards the lowest category index.
    pub fn top1(&self) -> (EmotionLabel, f64) {
        let mut best = 0;
        for i in 1..NUM_EMOTIONS {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        (EmotionLabel::ALL[best], self.probs[best])
    }
}

impl TryFrom<Vec<f64>> for EmotionDistribution {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(&value)
    }
}

impl From<EmotionDistribution> for Vec<f64> {
    fn from(value: EmotionDistribution) -> Self {
        value.probs.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_endpoints() {
        assert_eq!(one_hot_encode(EmotionLabel::Amusement).as_array(), [1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(one_hot_encode(EmotionLabel::Sadness).as_array(), [0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn one_hot_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for label in EmotionLabel::ALL {
            let oh = one_hot_encode(label);
            assert_eq!(oh.decode(), label);
            assert!(seen.insert(oh.as_array()));
            assert_eq!(oh.as_array().iter().map(|&v| v as u32).sum::<u32>(), 1);
        }
        assert_eq!(seen.len(), NUM_EMOTIONS);
    }

    #[test]
    fn valence_split() {
        assert_eq!(valence_of(EmotionLabel::Excitement), Valence::Positive);
        assert_eq!(valence_of(EmotionLabel::Fear), Valence::Negative);
        let positives = EmotionLabel::ALL
            .iter()
            .filter(|e| e.valence() == Valence::Positive)
            .count();
        assert_eq!(positives, 4);
        assert_eq!(EmotionLabel::Awe.cross_valence_targets().count(), 4);
    }

    #[test]
    fn fixed_index_order() {
        let names: Vec<_> = EmotionLabel::ALL.iter().map(|e| e.name()).collect();
        assert_eq!(
            names,
            ["amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness"]
        );
        for (i, e) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(e.index(), i);
            assert_eq!(e.name().parse::<EmotionLabel>().unwrap(), *e);
        }
    }

    #[test]
    fn one_hot_rejects_bad_vectors() {
        assert!(EmotionOneHot::from_slice(&[0.0; 8]).is_err());
        assert!(EmotionOneHot::from_slice(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(EmotionOneHot::from_slice(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(EmotionOneHot::from_slice(&[1.0; 3]).is_err());
    }

    #[test]
    fn distribution_sum_guard() {
        let mut p = [0.0; 8];
        p[0] = 1.0 + 2e-6;
        assert!(EmotionDistribution::new(&p).is_err());
        p[0] = 1.0 + 5e-7;
        assert!(EmotionDistribution::new(&p).is_ok());
        p[0] = 1.1;
        p[1] = -0.1;
        assert!(EmotionDistribution::new(&p).is_err());
    }

    #[test]
    fn top1_ties_go_to_lowest_index() {
        let d = EmotionDistribution::new(&[0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.top1(), (EmotionLabel::Amusement, 0.9));
        let d = EmotionDistribution::new(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.top1(), (EmotionLabel::Amusement, 0.5));
        let d = EmotionDistribution::new(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.75]).unwrap();
        assert_eq!(d.top1(), (EmotionLabel::Sadness, 0.75));
    }
}
