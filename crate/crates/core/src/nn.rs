//! Parameter storage with seeded initialization, a few layer builders and
//! an Adam optimizer whose state can be checkpointed.
//!
//! Candle's CPU random generator cannot be seeded, so every random tensor in
//! this crate is drawn from a ChaCha stream and uploaded.

use std::collections::{BTreeMap, HashMap};

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn rng_from(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

pub fn tensor_from_f32(values: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Named trainable tensors, ordered by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: rng_from(seed, 0x5eed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&tensor_from_f32(values, shape, self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = normal_vec(&mut self.rng, n).into_iter().map(|v| v * std).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let std = (1.0 / in_dim as f32).sqrt();
        let w = self.normal(&format!("{name}.weight"), &[out_dim, in_dim], std)?;
        let b = self.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn linear_no_bias(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let std = (1.0 / in_dim as f32).sqrt();
        let w = self.normal(&format!("{name}.weight"), &[out_dim, in_dim], std)?;
        Ok(Linear::new(w, None))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let w = self.normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], std)?;
        let b = self.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        let cfg = Conv2dConfig {
            padding,
            stride,
            dilation: 1,
            groups: 1,
            cudnn_fwd_algo: None,
        };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    pub fn group_norm(&mut self, name: &str, groups: usize, channels: usize) -> Result<GroupNorm> {
        let w = self.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let b = self.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors[prefix + name]`.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for v in to_f64_vec(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `stores` that received a
    /// gradient. Returns the number of parameters touched.
    pub fn step(&mut self, stores: &[(&str, &ParamStore)], grads: &GradStore) -> Result<usize> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut touched = 0;
        for (prefix, store) in stores {
            for (name, var) in store.vars() {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let key = format!("{prefix}{name}");
                let g = g.detach();
                let m_prev = match self.first.get(&key) {
                    Some(m) => m.clone(),
                    None => g.zeros_like()?,
                };
                let v_prev = match self.second.get(&key) {
                    Some(v) => v.clone(),
                    None => g.zeros_like()?,
                };
                let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                let denom = ((v.sqrt()? / bc2.sqrt())? + self.eps)?;
                let update = ((&m / denom)? * (self.lr / bc1))?;
                let new = (var.as_detached_tensor() - update)?;
                var.set(&new)?;
                self.first.insert(key.clone(), m);
                self.second.insert(key, v);
                touched += 1;
            }
        }
        Ok(touched)
    }

    pub fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (k, v) in &self.first {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out.insert(
            "adam.step".into(),
            Tensor::new(&[self.step as f64], &Device::Cpu)?,
        );
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.second.insert(name.to_string(), t.clone());
            }
        }
        let step = tensors
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?;
        self.step = to_f64_vec(step)?[0] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        a.linear("l", 4, 3).unwrap();
        b.linear("l", 4, 3).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let mut c = ParamStore::new(8, DType::F32);
        c.linear("l", 4, 3).unwrap();
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new(1, DType::F64);
        let x = store.constant("x", &[3], 5.0).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let loss = (&x - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&[("", &store)], &grads).unwrap();
        }
        let got = to_f64_vec(store.get("x").unwrap().as_tensor()).unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - t).abs() < 1e-3, "{got:?}");
        }
    }
}
