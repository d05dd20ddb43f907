//! Gradient-weighted class activation maps.

use candle_core::{DType, IndexOp, Tensor, Var, D};

use crate::domain::NUM_EMOTIONS;
use crate::error::{Error, Result};
use crate::nn::to_f64_vec;

pub const DEFAULT_SALIENCY_THRESHOLD: f64 = 0.5;

/// A classifier split at its saliency layer.
pub trait CamModel {
    /// Activations of the saliency layer, NCHW.
    fn feature_maps(&self, input: &Tensor) -> Result<Tensor>;
    /// Class scores (pre-softmax) from saliency-layer activations.
    fn head(&self, features: &Tensor) -> Result<Tensor>;
}

/// Per-pixel saliency in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "saliency map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn binarize(&self, threshold: f64) -> Vec<u8> {
        binarize_saliency(self, threshold)
    }
}

/// 1 where the map reaches `threshold`, 0 elsewhere.
pub fn binarize_saliency(map: &SaliencyMap, threshold: f64) -> Vec<u8> {
    map.values.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Grad-CAM for a single image (`input` has batch size 1). The map is
/// upsampled bilinearly to the input's spatial size and divided by its
/// maximum; an all-zero map stays all-zero.
pub fn grad_cam<M: CamModel + ?Sized>(model: &M, input: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    if class_index >= NUM_EMOTIONS {
        return Err(Error::InvalidValue(format!("class index {class_index} out of range")));
    }
    let (n, _, in_h, in_w) = input.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("grad_cam takes one image, got a batch of {n}")));
    }
    let feats = model.feature_maps(input)?.detach();
    let dims = feats.dims();
    if dims.len() != 4 || dims[2] < 2 || dims[3] < 2 {
        return Err(Error::Config(format!(
            "saliency layer must be NCHW with spatial extent >= 2x2, got {dims:?}"
        )));
    }
    let (_, channels, fh, fw) = feats.dims4()?;
    let feats = Var::from_tensor(&feats)?;
    let logits = model.head(feats.as_tensor())?;
    let score = logits.i((0, class_index))?;
    let grads = score.backward()?;
    let activations = to_f64_vec(feats.as_tensor())?;
    let gradient = match grads.get(feats.as_tensor()) {
        Some(g) => to_f64_vec(&g.to_dtype(DType::F64)?.mean(D::Minus1)?.mean(D::Minus1)?)?,
        None => vec![0.0; channels],
    };
    let plane = fh * fw;
    let mut cam = vec![0.0f64; plane];
    for (c, w) in gradient.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let a = &activations[c * plane..(c + 1) * plane];
        for (dst, v) in cam.iter_mut().zip(a) {
            *dst += w * v;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let mut up = bilinear_resize(&cam, fh, fw, in_h, in_w);
    let max = up.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in up.iter_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    } else {
        up.iter_mut().for_each(|v| *v = 0.0);
    }
    SaliencyMap::new(in_h, in_w, up)
}

/// Half-pixel-centred bilinear interpolation with edge clamping.
pub(crate) fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, o: usize| {
        let x = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        let (y0, y1, fy) = coord(dh, sh, y);
        for x in 0..dw {
            let (x0, x1, fx) = coord(dw, sw, x);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[y * dw + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::ops;

    /// Hand-wired two-layer model. Layer one emits four channels, channel q
    /// being the channel-mean intensity masked to quadrant q; the score of
    /// class k is `scale` times the mean of quadrant (k mod 4).
    struct QuadrantModel {
        scale: f64,
    }

    impl CamModel for QuadrantModel {
        fn feature_maps(&self, input: &Tensor) -> Result<Tensor> {
            let (_, _, h, w) = input.dims4()?;
            let mut mask = vec![0.0f64; 4 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let q = usize::from(y >= h / 2) * 2 + usize::from(x >= w / 2);
                    mask[q * h * w + y * w + x] = 1.0;
                }
            }
            let mask = Tensor::from_vec(mask, (1, 4, h, w), input.device())?;
            Ok(input.mean_keepdim(1)?.broadcast_mul(&mask)?)
        }
        fn head(&self, features: &Tensor) -> Result<Tensor> {
            let means = (features.mean(D::Minus1)?.mean(D::Minus1)? * 4.0)?;
            let idx = Tensor::new(&[0u32, 1, 2, 3, 0, 1, 2, 3], features.device())?;
            Ok((means.index_select(&idx, 1)? * self.scale)?)
        }
    }

    struct ZeroHead;

    impl CamModel for ZeroHead {
        fn feature_maps(&self, input: &Tensor) -> Result<Tensor> {
            Ok(input.mean_keepdim(1)?)
        }
        fn head(&self, features: &Tensor) -> Result<Tensor> {
            let pooled = features.mean(D::Minus1)?.mean(D::Minus1)?;
            Ok((pooled.repeat((1, NUM_EMOTIONS))? * 0.0)?)
        }
    }

    struct FlatModel;

    impl CamModel for FlatModel {
        fn feature_maps(&self, input: &Tensor) -> Result<Tensor> {
            Ok(input.mean(D::Minus1)?.mean(D::Minus1)?)
        }
        fn head(&self, features: &Tensor) -> Result<Tensor> {
            Ok(ops::softmax_last_dim(&features.repeat((1, 3))?)?)
        }
    }

    fn positive_input(side: usize) -> Tensor {
        let v: Vec<f64> = (0..3 * side * side).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect();
        Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn quadrant_model_concentrates_mass() {
        // class 3 reads the bottom-right quadrant
        let map = grad_cam(&QuadrantModel { scale: 1.0 }, &positive_input(16), 3).unwrap();
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let (mut inside, mut outside) = (0.0, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                let v = map.values[y * 16 + x];
                if y >= 8 && x >= 8 {
                    inside += v / 64.0;
                } else {
                    outside += v / 192.0;
                }
            }
        }
        assert!(inside > outside, "inside {inside} outside {outside}");
        assert!(map.values.iter().cloned().fold(0.0, f64::max) == 1.0);
    }

    #[test]
    fn invariant_to_positive_gradient_rescaling() {
        let x = positive_input(16);
        let a = grad_cam(&QuadrantModel { scale: 1.0 }, &x, 0).unwrap();
        let b = grad_cam(&QuadrantModel { scale: 37.5 }, &x, 0).unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradients_give_zero_map() {
        let map = grad_cam(&ZeroHead, &positive_input(8), 1).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!((map.height, map.width), (8, 8));
    }

    #[test]
    fn missing_spatial_layer_is_a_config_error() {
        assert!(matches!(grad_cam(&FlatModel, &positive_input(8), 0), Err(Error::Config(_))));
        assert!(grad_cam(&ZeroHead, &positive_input(8), 8).is_err());
    }

    #[test]
    fn binarize_rules() {
        let constant = SaliencyMap::new(2, 2, vec![0.4; 4]).unwrap();
        assert_eq!(binarize_saliency(&constant, 0.5), vec![0; 4]);
        let half = SaliencyMap::new(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(binarize_saliency(&half, 0.5), vec![1; 4]);
        let checker = SaliencyMap::new(2, 2, vec![0.2, 0.8, 0.8, 0.2]).unwrap();
        assert_eq!(binarize_saliency(&checker, 0.5), vec![0, 1, 1, 0]);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(bilinear_resize(&src, 4, 4, 4, 4), src);
        let c = bilinear_resize(&[3.0; 4], 2, 2, 8, 8);
        assert!(c.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ones_count_non_increasing_in_threshold(
                vals in proptest::collection::vec(0.0f64..=1.0, 16),
                t1 in 0.01f64..0.99, t2 in 0.01f64..0.99,
            ) {
                let m = SaliencyMap::new(4, 4, vals).unwrap();
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let count = |t| binarize_saliency(&m, t).iter().map(|&v| v as u32).sum::<u32>();
                prop_assert!(count(hi) <= count(lo));
            }
        }
    }
}
