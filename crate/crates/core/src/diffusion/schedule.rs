use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Linear-beta forward process. Timesteps are 1-based: `alpha(t)` for
/// `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let alpha: Vec<f64> = (0..steps)
            .map(|i| {
                let beta = if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                };
                1.0 - beta
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            config,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidValue(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    /// ᾱ_t, with ᾱ_0 = 1 for the clean end of the chain.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Closed form z_t = √ᾱ_t z0 + √(1-ᾱ_t) ε for a single timestep.
    pub fn add_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!("latent {:?} vs noise {:?}", z0.dims(), eps.dims())));
        }
        Ok(mix(z0, eps, self.alpha_bar[t - 1])?)
    }

    /// Batched closed form with one timestep per leading-axis item.
    pub fn add_noise_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::Shape(format!("latent {:?} vs noise {:?}", z0.dims(), eps.dims())));
        }
        if z0.dim(0)? != ts.len() {
            return Err(Error::Shape("one timestep per batch item".into()));
        }
        let mut rows = Vec::with_capacity(ts.len());
        for (i, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            rows.push(mix(&z0.narrow(0, i, 1)?, &eps.narrow(0, i, 1)?, self.alpha_bar[t - 1])?);
        }
        Ok(Tensor::cat(&rows, 0)?)
    }
}

fn mix(z0: &Tensor, eps: &Tensor, ab: f64) -> candle_core::Result<Tensor> {
    (z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?
}

/// Same mixing on plain slices, used by scalar tests and oracles.
pub fn add_noise_slice(schedule: &NoiseSchedule, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::InvalidValue("timestep 0 is not a noising step".into()));
    }
    if z0.len() != eps.len() {
        return Err(Error::Shape("latent and noise lengths differ".into()));
    }
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from;
    use candle_core::Device;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_step() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn invalid_ranges() {
        assert!(build_schedule(0, 1e-4, 2e-2).is_err());
        assert!(build_schedule(10, 0.0, 2e-2).is_err());
        assert!(build_schedule(10, 0.1, 0.05).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_endpoints() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        assert!(s.alpha_bar(1000).unwrap() < 0.01);
        assert!(s.alpha(0).is_err() && s.alpha(1001).is_err());
    }

    #[test]
    fn degenerate_and_zero_noise() {
        // beta so small that alpha_bar rounds to 1
        let s = build_schedule(3, 1e-300, 1e-300).unwrap();
        let z0 = Tensor::new(&[[0.25f64, -1.5], [3.0, 0.0]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[1.0f64, 2.0], [-1.0, 0.5]], &Device::Cpu).unwrap();
        let zt = s.add_noise(&z0, 2, &eps).unwrap();
        let d = (zt - &z0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-140);

        let s = build_schedule(10, 1e-3, 0.2).unwrap();
        let zero = z0.zeros_like().unwrap();
        let zt = s.add_noise(&z0, 7, &zero).unwrap();
        let expect = (&z0 * s.alpha_bar(7).unwrap().sqrt()).unwrap();
        assert_eq!(zt.to_vec2::<f64>().unwrap(), expect.to_vec2::<f64>().unwrap());
        assert!(s.add_noise(&z0, 11, &eps).is_err());
    }

    #[test]
    fn closed_form_matches_iterated_recurrence_in_moments() {
        let s = build_schedule(5, 0.05, 0.3).unwrap();
        let mut rng = rng_from(3, 0);
        let n = 20_000;
        let z0 = 1.3;
        let (mut m1, mut v1, mut m2, mut v2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let mut z = z0;
            for t in 1..=5 {
                let a = s.alpha(t).unwrap();
                let e: f64 = StandardNormal.sample(&mut rng);
                z = a.sqrt() * z + (1.0 - a).sqrt() * e;
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            let c = add_noise_slice(&s, &[z0], 5, &[e]).unwrap()[0];
            m1 += z;
            v1 += z * z;
            m2 += c;
            v2 += c * c;
        }
        let nf = n as f64;
        let (m1, m2) = (m1 / nf, m2 / nf);
        let (v1, v2) = (v1 / nf - m1 * m1, v2 / nf - m2 * m2);
        let ab = s.alpha_bar(5).unwrap();
        assert!((m1 - z0 * ab.sqrt()).abs() < 0.03);
        assert!((m2 - z0 * ab.sqrt()).abs() < 0.03);
        assert!((v1 / (1.0 - ab) - 1.0).abs() < 0.05);
        assert!((v2 / (1.0 - ab) - 1.0).abs() < 0.05);
    }
}
