use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub noise_loss: f64,
    pub alignment_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(noise_loss: f64, alignment_loss: f64, lambda: f64) -> Self {
        Self {
            noise_loss,
            alignment_loss,
            total: noise_loss + lambda * alignment_loss,
            lambda,
        }
    }
}

/// 1 - cos(e, c) on plain vectors.
pub fn alignment_loss(e: &[f64], c: &[f64]) -> Result<f64> {
    if e.len() != c.len() {
        return Err(Error::Shape(format!("embedding widths {} and {}", e.len(), c.len())));
    }
    let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne < NORM_FLOOR || nc < NORM_FLOOR {
        return Err(Error::NonFinite {
            component: "alignment (zero-norm embedding)".into(),
        });
    }
    let dot: f64 = e.iter().zip(c).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (ne * nc)).clamp(0.0, 2.0))
}

/// Per-row 1 - cos for (B, d) tensors, averaged over the batch.
pub fn alignment_loss_tensor(e: &Tensor, c: &Tensor) -> Result<Tensor> {
    if e.dims() != c.dims() {
        return Err(Error::Shape(format!("embeddings {:?} vs {:?}", e.dims(), c.dims())));
    }
    let ne = e.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nc = c.sqr()?.sum(D::Minus1)?.sqrt()?;
    let min_norm = ne.min(0)?.minimum(&nc.min(0)?)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !(min_norm >= NORM_FLOOR) {
        return Err(Error::NonFinite {
            component: "alignment (zero-norm embedding)".into(),
        });
    }
    let cos = ((e * c)?.sum(D::Minus1)? / (ne * nc)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean squared error over every element.
pub fn noise_loss(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", pred.dims(), truth.dims())));
    }
    Ok((pred - truth)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn exact_values() {
        let c = [0.3, -1.2, 2.0];
        assert!(alignment_loss(&c, &c).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        assert!((alignment_loss(&neg, &c).unwrap() - 2.0).abs() < 1e-15);
        assert!((alignment_loss(&[1.0, 0.0, 0.0], &[0.0, 5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(alignment_loss(&[0.0; 3], &c).is_err());
        assert!(alignment_loss(&[1.0], &c).is_err());
    }

    #[test]
    fn tensor_version_matches_scalar() {
        let e = Tensor::new(&[[0.2f64, 0.5, -1.0], [1.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        let c = Tensor::new(&[[0.1f64, -0.4, 0.3], [1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let got = alignment_loss_tensor(&e, &c).unwrap().to_scalar::<f64>().unwrap();
        let ev = e.to_vec2::<f64>().unwrap();
        let cv = c.to_vec2::<f64>().unwrap();
        let want = (alignment_loss(&ev[0], &cv[0]).unwrap() + alignment_loss(&ev[1], &cv[1]).unwrap()) / 2.0;
        assert!((got - want).abs() < 1e-12);
        let z = Tensor::zeros((1, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(alignment_loss_tensor(&z, &c.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn noise_loss_values() {
        let a = Tensor::new(&[[[0.5f64, -1.0], [2.0, 0.0]], [[1.5, 1.5], [-0.25, 3.0]]], &Device::Cpu).unwrap();
        assert_eq!(noise_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let shifted = (&a + 1.0).unwrap();
        assert!((noise_loss(&shifted, &a).unwrap().to_scalar::<f64>().unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::new(&[[[0.0f64, 0.0], [1.0, 1.0]], [[1.0, 2.0], [0.75, 0.0]]], &Device::Cpu).unwrap();
        // squared diffs: .25 1 1 1 .25 .25 1 9 -> 13.75 / 8
        assert!((noise_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap() - 13.75 / 8.0).abs() < 1e-15);
        assert!(noise_loss(&a, &b.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.8, 0.3, DEFAULT_LAMBDA);
        assert_eq!(b.total, 0.8 + 0.5 * 0.3);
    }

    proptest! {
        #[test]
        fn range_symmetry_and_scale_invariance(
            e in prop::collection::vec(-5.0f64..5.0, 6),
            c in prop::collection::vec(-5.0f64..5.0, 6),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3) && c.iter().any(|v| v.abs() > 1e-3));
            let l = alignment_loss(&e, &c).unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
            prop_assert!((l - alignment_loss(&c, &e).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = e.iter().map(|v| v * k).collect();
            prop_assert!((l - alignment_loss(&scaled, &c).unwrap()).abs() < 1e-9);
        }
    }
}
