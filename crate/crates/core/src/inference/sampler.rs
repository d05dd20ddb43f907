use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{EditorNets, LatentCodec};
use crate::domain::{EmotionLabel, ImageBuffer};
use crate::error::{Error, Result};
use crate::nn::{normal_vec, rng_from, tensor_from_f32};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Denoising steps for a full-strength run; partial runs use the
    /// proportional share.
    pub steps: usize,
    pub guidance_image: f64,
    pub guidance_emotion: f64,
    /// Fraction of T the input latent is noised to before denoising.
    pub strength: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_image: 1.5,
            guidance_emotion: 5.0,
            strength: 0.8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, max_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > max_steps {
            return Err(Error::Config(format!("sampler steps {} outside 1..={max_steps}", self.steps)));
        }
        for (name, g) in [("image", self.guidance_image), ("emotion", self.guidance_emotion)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("{name} guidance must be finite and >= 0, got {g}")));
            }
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config(format!("strength must lie in (0,1], got {}", self.strength)));
        }
        Ok(())
    }
}

/// Descending timesteps from `t_start` towards 1, `n` of them.
pub fn ddim_timesteps(t_start: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, t_start);
    let mut ts: Vec<usize> = (0..n)
        .map(|i| {
            let frac = i as f64 / n as f64;
            (t_start as f64 - frac * t_start as f64).round().max(1.0) as usize
        })
        .collect();
    ts.dedup();
    ts
}

/// Noises `start` to `strength * T` and runs deterministic DDIM with
/// two-scale classifier-free guidance:
/// eps = eps(∅,∅) + s_I (eps(z,∅) - eps(∅,∅)) + s_E (eps(z,e) - eps(z,∅)).
pub fn sample_latent(
    nets: &EditorNets,
    start: &Tensor,
    condition: &Tensor,
    emotion: &Tensor,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<Tensor> {
    let schedule = &nets.schedule;
    let big_t = schedule.steps();
    cfg.validate(big_t)?;
    let dtype = nets.denoiser.params().dtype();
    let dims = nets.denoiser.latent_dims(1);
    if start.dims4()? != dims || condition.dims4()? != dims {
        return Err(Error::Shape(format!(
            "sampler expects latents {dims:?}, got {:?} and {:?}",
            start.dims(),
            condition.dims()
        )));
    }
    let t_start = ((cfg.strength * big_t as f64).round() as usize).clamp(1, big_t);
    let n = ((cfg.steps as f64 * cfg.strength).round() as usize).max(1);
    let ts = ddim_timesteps(t_start, n);

    let mut rng = rng_from(cfg.seed, stream);
    let (b, c, h, w) = dims;
    let eps0 = tensor_from_f32(normal_vec(&mut rng, b * c * h * w), &[b, c, h, w], dtype)?;
    let mut z = schedule.add_noise(&start.to_dtype(dtype)?, t_start, &eps0)?;

    let cond = condition.to_dtype(dtype)?;
    let null_img = cond.zeros_like()?;
    let null_e = nets.emotion.null_embedding().unsqueeze(1)?;
    let e = emotion.to_dtype(dtype)?.reshape((1, 1, nets.emotion.width()))?;
    let use_emotion = cfg.guidance_emotion != 0.0;
    let (conds, ctxs) = if use_emotion {
        (vec![&null_img, &cond, &cond], vec![&null_e, &null_e, &e])
    } else {
        (vec![&null_img, &cond], vec![&null_e, &null_e])
    };
    let cond_batch = Tensor::cat(&conds, 0)?;
    let ctx_batch = Tensor::cat(&ctxs, 0)?;
    let rows = conds.len();

    for (i, &t) in ts.iter().enumerate() {
        let t_next = ts.get(i + 1).copied().unwrap_or(0);
        let z_batch = Tensor::cat(&vec![&z; rows], 0)?;
        let out = nets.denoiser.forward(&z_batch, &vec![t; rows], &cond_batch, &ctx_batch)?;
        let eps_u = out.narrow(0, 0, 1)?;
        let eps_i = out.narrow(0, 1, 1)?;
        let mut eps = (&eps_u + ((&eps_i - &eps_u)? * cfg.guidance_image)?)?;
        if use_emotion {
            let eps_f = out.narrow(0, 2, 1)?;
            eps = (eps + ((eps_f - &eps_i)? * cfg.guidance_emotion)?)?;
        }
        let ab = schedule.alpha_bar(t)?;
        let ab_next = schedule.alpha_bar(t_next)?;
        let x0 = ((&z - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        z = ((x0 * ab_next.sqrt())? + (eps * (1.0 - ab_next).sqrt())?)?;
    }
    let v = z.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            component: "sampler".into(),
        });
    }
    Ok(z)
}

/// Encodes input and condition, samples towards `target` and decodes.
pub fn sample_edit(
    nets: &EditorNets,
    codec: &LatentCodec,
    input: &ImageBuffer,
    condition: &ImageBuffer,
    target: EmotionLabel,
    cfg: &SamplerConfig,
    stream: u64,
) -> Result<ImageBuffer> {
    nets.check_codec(codec)?;
    condition.ensure_same_dims(input)?;
    let start = codec.encode(input)?;
    let cond = codec.encode(condition)?;
    let e = nets.emotion.encode(target)?;
    let z = sample_latent(nets, &start, &cond, &e, cfg, stream)?;
    codec.decode(&z.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_descend_to_one() {
        assert_eq!(ddim_timesteps(10, 5), vec![10, 8, 6, 4, 2]);
        assert_eq!(ddim_timesteps(3, 10), vec![3, 2, 1]);
        assert_eq!(ddim_timesteps(800, 40).len(), 40);
        assert_eq!(ddim_timesteps(1, 1), vec![1]);
    }

    #[test]
    fn config_bounds() {
        let mut c = SamplerConfig::default();
        assert!(c.validate(1000).is_ok());
        c.steps = 0;
        assert!(c.validate(1000).is_err());
        c.steps = 1001;
        assert!(c.validate(1000).is_err());
        let c = SamplerConfig {
            guidance_emotion: -1.0,
            ..Default::default()
        };
        assert!(c.validate(1000).is_err());
        let c = SamplerConfig {
            strength: 0.0,
            ..Default::default()
        };
        assert!(c.validate(1000).is_err());
    }
}
