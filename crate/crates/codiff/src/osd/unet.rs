//! Noise-prediction UNet conditioned on embedder tokens via cross-attention.
//! Every forward pass bumps an evaluation counter so the one-step property
//! can be asserted from the outside.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Downsample, ResidualBlock, Upsample};
use crate::nn::store::ParamStore;
use crate::nn::{tokens_from_map, LayerSpec};

use super::lora::{LoraConv2d, LoraLinear};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub ctx_dim: usize,
}

impl UNetConfig {
    pub fn toy(in_channels: usize, ctx_dim: usize) -> Self {
        Self {
            in_channels,
            base_width: 16,
            ctx_dim,
        }
    }
}

/// Single-head cross-attention with low-rank-adaptable projections.
struct Attention {
    to_q: LoraLinear,
    to_k: LoraLinear,
    to_v: LoraLinear,
    to_out: LoraLinear,
    dim: usize,
}

impl Attention {
    fn new(
        store: &ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        adapters: Option<(&ParamStore, usize)>,
    ) -> Result<Self> {
        Ok(Self {
            to_q: LoraLinear::new(store, &format!("{name}.to_q"), dim, dim, adapters)?,
            to_k: LoraLinear::new(store, &format!("{name}.to_k"), ctx_dim, dim, adapters)?,
            to_v: LoraLinear::new(store, &format!("{name}.to_v"), ctx_dim, dim, adapters)?,
            to_out: LoraLinear::new(store, &format!("{name}.to_out"), dim, dim, adapters)?,
            dim,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = tokens_from_map(x)?;
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(ctx)?;
        let v = self.to_v.forward(ctx)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, 2)?;
        let out = self.to_out.forward(&attn.matmul(&v)?)?;
        let out = (out + tokens)?;
        Ok(out.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

pub struct UNet {
    pub cfg: UNetConfig,
    conv_in: LoraConv2d,
    down_block: ResidualBlock,
    down: Downsample,
    mid1: ResidualBlock,
    attn: Attention,
    mid2: ResidualBlock,
    up: Upsample,
    up_block: ResidualBlock,
    conv_out: LoraConv2d,
    evals: AtomicUsize,
}

impl UNet {
    pub fn new(
        store: &ParamStore,
        cfg: &UNetConfig,
        adapters: Option<(&ParamStore, usize)>,
    ) -> Result<Self> {
        let w = cfg.base_width;
        let c = cfg.in_channels;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in: LoraConv2d::new(store, "unet.conv_in", c, w, 3, 1, 1, adapters)?,
            down_block: ResidualBlock::new(store, "unet.down_block", w, w)?,
            down: Downsample::new(store, "unet.down", w, 2 * w)?,
            mid1: ResidualBlock::new(store, "unet.mid1", 2 * w, 2 * w)?,
            attn: Attention::new(store, "unet.attn", 2 * w, cfg.ctx_dim, adapters)?,
            mid2: ResidualBlock::new(store, "unet.mid2", 2 * w, 2 * w)?,
            up: Upsample::new(store, "unet.up", 2 * w, w)?,
            up_block: ResidualBlock::new(store, "unet.up_block", w, w)?,
            conv_out: LoraConv2d::new(store, "unet.conv_out", w, c, 3, 1, 1, adapters)?,
            evals: AtomicUsize::new(0),
        })
    }

    /// Noise prediction ε̂ for latent `z` (B, c, h, w) with embedder context
    /// `ctx` (B, K, ctx_dim); h and w must be even.
    pub fn forward(&self, z: &Tensor, ctx: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape("unet input channels", self.cfg.in_channels, c));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::domain(format!("latent {h}x{w} must be even-sized")));
        }
        let (_, _, ctx_d) = ctx.dims3()?;
        if ctx_d != self.cfg.ctx_dim {
            return Err(Error::shape("context dim", self.cfg.ctx_dim, ctx_d));
        }
        self.evals.fetch_add(1, Ordering::SeqCst);
        let s = self.down_block.forward(&self.conv_in.forward(z)?, train)?;
        let m = self.mid1.forward(&self.down.forward(&s)?, train)?;
        let m = self.attn.forward(&m, ctx)?;
        let m = self.mid2.forward(&m, train)?;
        let u = self.up_block.forward(&(self.up.forward(&m)? + s)?, train)?;
        self.conv_out.forward(&u)
    }

    /// Number of noise predictions performed since construction.
    pub fn eval_count(&self) -> usize {
        self.evals.load(Ordering::SeqCst)
    }

    pub fn complexity_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let wd = self.cfg.base_width;
        let c = self.cfg.in_channels;
        let d = 2 * wd;
        let (h2, w2) = (h / 2, w / 2);
        let k_ctx = h / 8 * (w / 8); // representative token count
        let mut specs = vec![LayerSpec::Conv2d {
            kernel: 3,
            c_in: c,
            c_out: wd,
            h_out: h,
            w_out: w,
        }];
        specs.extend(ResidualBlock::specs(wd, wd, h, w));
        specs.extend(Downsample::specs(wd, d, h2, w2));
        specs.extend(ResidualBlock::specs(d, d, h2, w2));
        let tokens = h2 * w2;
        specs.push(LayerSpec::Dense {
            in_dim: d,
            out_dim: d,
            positions: tokens,
        });
        for _ in 0..2 {
            specs.push(LayerSpec::Dense {
                in_dim: self.cfg.ctx_dim,
                out_dim: d,
                positions: k_ctx,
            });
        }
        specs.push(LayerSpec::MatMul {
            m: tokens,
            k: d,
            n: k_ctx,
        });
        specs.push(LayerSpec::MatMul {
            m: tokens,
            k: k_ctx,
            n: d,
        });
        specs.push(LayerSpec::Dense {
            in_dim: d,
            out_dim: d,
            positions: tokens,
        });
        specs.extend(ResidualBlock::specs(d, d, h2, w2));
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: d,
            c_out: wd,
            h_out: h,
            w_out: w,
        });
        specs.extend(ResidualBlock::specs(wd, wd, h, w));
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: wd,
            c_out: c,
            h_out: h,
            w_out: w,
        });
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn output_shape_matches_input_and_counter_increments() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let cfg = UNetConfig {
            in_channels: 4,
            base_width: 8,
            ctx_dim: 16,
        };
        let unet = UNet::new(&store, &cfg, None).unwrap();
        let z = crate::nn::seeded_tensor(&[2, 4, 8, 8], 2, &Device::Cpu, DType::F32).unwrap();
        let ctx = crate::nn::seeded_tensor(&[2, 6, 16], 3, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(unet.eval_count(), 0);
        let out = unet.forward(&z, &ctx, false).unwrap();
        assert_eq!(out.dims(), z.dims());
        assert_eq!(unet.eval_count(), 1);
        unet.forward(&z, &ctx, false).unwrap();
        assert_eq!(unet.eval_count(), 2);
    }

    #[test]
    fn context_dim_mismatch_rejected() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let cfg = UNetConfig {
            in_channels: 4,
            base_width: 8,
            ctx_dim: 16,
        };
        let unet = UNet::new(&store, &cfg, None).unwrap();
        let z = crate::nn::seeded_tensor(&[1, 4, 8, 8], 2, &Device::Cpu, DType::F32).unwrap();
        let ctx = crate::nn::seeded_tensor(&[1, 6, 12], 3, &Device::Cpu, DType::F32).unwrap();
        assert!(unet.forward(&z, &ctx, false).is_err());
    }

    #[test]
    fn context_changes_output() {
        let store = ParamStore::new(1, Device::Cpu, DType::F32);
        let cfg = UNetConfig {
            in_channels: 4,
            base_width: 8,
            ctx_dim: 16,
        };
        let unet = UNet::new(&store, &cfg, None).unwrap();
        let z = crate::nn::seeded_tensor(&[1, 4, 8, 8], 2, &Device::Cpu, DType::F32).unwrap();
        let c1 = crate::nn::seeded_tensor(&[1, 6, 16], 3, &Device::Cpu, DType::F32).unwrap();
        let c2 = crate::nn::seeded_tensor(&[1, 6, 16], 4, &Device::Cpu, DType::F32).unwrap();
        let o1 = unet.forward(&z, &c1, false).unwrap();
        let o2 = unet.forward(&z, &c2, false).unwrap();
        let d = (o1 - o2)
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_vec0::<f32>()
            .unwrap();
        assert!(d > 0.0);
    }
}
