//! Conditional noise predictor: a two-level U-net over latents with
//! timestep-modulated residual blocks and cross-attention to the emotion
//! context.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{ops::softmax_last_dim, Conv2d, GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_side: usize,
    /// Widths of the full- and half-resolution levels.
    pub channels: [usize; 2],
    pub context_width: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 8,
            channels: [48, 96],
            context_width: 128,
            seed: 53,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_side < 2 || self.latent_side % 2 != 0 {
            return Err(Error::Config(format!("latent side {} must be even and >= 2", self.latent_side)));
        }
        if self.channels.iter().any(|&c| c == 0 || c % 2 != 0) || self.latent_channels == 0 || self.context_width == 0 {
            return Err(Error::Config("denoiser widths must be positive and even".into()));
        }
        Ok(())
    }
}

fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: p.group_norm(&format!("{name}.norm1"), groups_for(cin), cin)?,
            conv1: p.conv2d(&format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            time: p.linear(&format!("{name}.time"), temb, cout)?,
            norm2: p.group_norm(&format!("{name}.norm2"), groups_for(cout), cout)?,
            conv2: p.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout {
                Some(p.conv2d(&format!("{name}.skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl CrossAttention {
    fn new(p: &mut ParamStore, name: &str, channels: usize, context: usize) -> Result<Self> {
        Ok(Self {
            norm: p.group_norm(&format!("{name}.norm"), groups_for(channels), channels)?,
            q: p.linear_no_bias(&format!("{name}.q"), channels, channels)?,
            k: p.linear_no_bias(&format!("{name}.k"), context, channels)?,
            v: p.linear_no_bias(&format!("{name}.v"), context, channels)?,
            out: p.linear(&format!("{name}.out"), channels, channels)?,
            channels,
        })
    }

    /// x: (B, C, H, W), context: (B, L, d).
    fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.q.forward(&seq)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.channels as f64).sqrt())?;
        let attn = softmax_last_dim(&scores)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_down: ResBlock,
    attn_down: CrossAttention,
    down: Conv2d,
    res_mid: ResBlock,
    attn_mid: CrossAttention,
    up: Conv2d,
    res_up: ResBlock,
    attn_up: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(config.seed, dtype);
        let [c0, c1] = config.channels;
        let temb = 4 * c0;
        let ctx = config.context_width;
        let lc = config.latent_channels;
        let time1 = p.linear("time1", c0, temb)?;
        let time2 = p.linear("time2", temb, temb)?;
        let conv_in = p.conv2d("conv_in", 2 * lc, c0, 3, 1, 1)?;
        let res_down = ResBlock::new(&mut p, "res_down", c0, c0, temb)?;
        let attn_down = CrossAttention::new(&mut p, "attn_down", c0, ctx)?;
        let down = p.conv2d("down", c0, c1, 3, 2, 1)?;
        let res_mid = ResBlock::new(&mut p, "res_mid", c1, c1, temb)?;
        let attn_mid = CrossAttention::new(&mut p, "attn_mid", c1, ctx)?;
        let up = p.conv2d("up", c1, c0, 3, 1, 1)?;
        let res_up = ResBlock::new(&mut p, "res_up", 2 * c0, c0, temb)?;
        let attn_up = CrossAttention::new(&mut p, "attn_up", c0, ctx)?;
        let norm_out = p.group_norm("norm_out", groups_for(c0), c0)?;
        let w = p.normal("conv_out.weight", &[lc, c0, 3, 3], 0.01)?;
        let b = p.constant("conv_out.bias", &[lc], 0.0)?;
        let conv_out = Conv2d::new(
            w,
            Some(b),
            candle_nn::Conv2dConfig {
                padding: 1,
                stride: 1,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            },
        );
        Ok(Self {
            config,
            params: p,
            time1,
            time2,
            conv_in,
            res_down,
            attn_down,
            down,
            res_mid,
            attn_mid,
            up,
            res_up,
            attn_up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn latent_dims(&self, batch: usize) -> (usize, usize, usize, usize) {
        let s = self.config.latent_side;
        (batch, self.config.latent_channels, s, s)
    }

    fn timestep_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let dim = self.config.channels[0];
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            let t = t as f64;
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| t * f).collect();
            data.extend(args.iter().map(|a| a.sin()));
            data.extend(args.iter().map(|a| a.cos()));
        }
        Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }

    /// Predicts the noise in `z_t`. `cond` is the source latent (zeros when
    /// dropped); `context` is (B, L, context_width).
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor, context: &Tensor) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        let expect = self.latent_dims(b);
        if z_t.dims4()? != expect || cond.dims4()? != expect {
            return Err(Error::Shape(format!(
                "denoiser expects latents {expect:?}, got {:?} and {:?}",
                z_t.dims(),
                cond.dims()
            )));
        }
        if ts.len() != b || context.dim(0)? != b || context.dim(D::Minus1)? != self.config.context_width {
            return Err(Error::Shape(format!(
                "batch {b}: {} timesteps, context {:?}",
                ts.len(),
                context.dims()
            )));
        }
        let temb = self.timestep_embedding(ts)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let x = self.conv_in.forward(&Tensor::cat(&[z_t, cond], 1)?)?;
        let h0 = self.attn_down.forward(&self.res_down.forward(&x, &temb)?, context)?;
        let h1 = self.down.forward(&h0)?;
        let h1 = self.attn_mid.forward(&self.res_mid.forward(&h1, &temb)?, context)?;
        let s = self.config.latent_side;
        let u = self.up.forward(&h1.upsample_nearest2d(s, s)?)?;
        let u = self.res_up.forward(&Tensor::cat(&[&u, &h0], 1)?, &temb)?;
        let u = self.attn_up.forward(&u, context)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&u)?.silu()?)?)
    }
}
