//! Small convolutional autoencoder mapping images to latents, plus an
//! identity variant used to test the restoration algebra in isolation.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ResidualBlock, Upsample};
use crate::nn::store::ParamStore;
use crate::nn::LayerSpec;

use super::lora::LoraConv2d;

/// Spatial factor is 2^n_down. The reference topology uses n_down=3 (f=8)
/// with 4 latent channels; the desk preset shrinks the factor so the latent
/// bottleneck does not dominate reconstruction error at toy patch sizes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VaeConfig {
    pub base_width: usize,
    pub latent_channels: usize,
    pub n_down: usize,
}

impl VaeConfig {
    pub fn full() -> Self {
        Self {
            base_width: 64,
            latent_channels: 4,
            n_down: 3,
        }
    }

    pub fn toy() -> Self {
        Self {
            base_width: 16,
            latent_channels: 8,
            n_down: 1,
        }
    }

    pub fn spatial_factor(&self) -> usize {
        1 << self.n_down
    }

    fn widths(&self) -> Vec<usize> {
        (0..=self.n_down).map(|i| self.base_width << i).collect()
    }
}

struct EncStage {
    down: LoraConv2d,
    block: ResidualBlock,
}

struct DecStage {
    up: Upsample,
    block: ResidualBlock,
}

/// Learned encoder/decoder. Encoder convolutions carry optional low-rank
/// adapters (stage-2 fine-tuning); everything else is plain.
pub struct VaeNet {
    pub cfg: VaeConfig,
    conv_in: LoraConv2d,
    enc_block: ResidualBlock,
    enc_stages: Vec<EncStage>,
    to_latent: LoraConv2d,
    from_latent: Conv2d,
    dec_block: ResidualBlock,
    dec_stages: Vec<DecStage>,
    conv_out: Conv2d,
}

impl VaeNet {
    /// `adapters`: store and rank for LoRA on the encoder convolutions; pass
    /// None for stage-0 pretraining and plain inference.
    pub fn new(
        store: &ParamStore,
        cfg: &VaeConfig,
        adapters: Option<(&ParamStore, usize)>,
    ) -> Result<Self> {
        let widths = cfg.widths();
        let w0 = widths[0];
        let w_max = *widths.last().expect("nonempty widths");
        let conv_in = LoraConv2d::new(store, "vae.enc.conv_in", 3, w0, 3, 1, 1, adapters)?;
        let enc_block = ResidualBlock::new(store, "vae.enc.block0", w0, w0)?;
        let mut enc_stages = Vec::new();
        for i in 0..cfg.n_down {
            let (ci, co) = (widths[i], widths[i + 1]);
            enc_stages.push(EncStage {
                down: LoraConv2d::new(
                    store,
                    &format!("vae.enc.down{i}"),
                    ci,
                    co,
                    4,
                    2,
                    1,
                    adapters,
                )?,
                block: ResidualBlock::new(store, &format!("vae.enc.block{}", i + 1), co, co)?,
            });
        }
        // two heads packed in one conv: mean and log-variance
        let to_latent = LoraConv2d::new(
            store,
            "vae.enc.to_latent",
            w_max,
            2 * cfg.latent_channels,
            3,
            1,
            1,
            adapters,
        )?;
        let from_latent = Conv2d::new(
            store,
            "vae.dec.from_latent",
            cfg.latent_channels,
            w_max,
            3,
            1,
            1,
        )?;
        let dec_block = ResidualBlock::new(store, "vae.dec.block0", w_max, w_max)?;
        let mut dec_stages = Vec::new();
        for i in 0..cfg.n_down {
            let (ci, co) = (widths[cfg.n_down - i], widths[cfg.n_down - i - 1]);
            dec_stages.push(DecStage {
                up: Upsample::new(store, &format!("vae.dec.up{i}"), ci, co)?,
                block: ResidualBlock::new(store, &format!("vae.dec.block{}", i + 1), co, co)?,
            });
        }
        let conv_out = Conv2d::new(store, "vae.dec.conv_out", w0, 3, 3, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            enc_block,
            enc_stages,
            to_latent,
            from_latent,
            dec_block,
            dec_stages,
            conv_out,
        })
    }

    fn check_dims(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.cfg.spatial_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::domain(format!(
                "input {h}x{w} not divisible by the spatial factor {f}"
            )));
        }
        Ok(())
    }

    /// Returns (mean, log-variance), each (B, c, H/f, W/f).
    pub fn encode_dist(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        self.check_dims(x)?;
        let mut h = self.enc_block.forward(&self.conv_in.forward(x)?, train)?;
        for st in &self.enc_stages {
            h = st.block.forward(&st.down.forward(&h)?, train)?;
        }
        let both = self.to_latent.forward(&h)?;
        let c = self.cfg.latent_channels;
        let mu = both.narrow(1, 0, c)?;
        let logvar = both.narrow(1, c, c)?.clamp(-10.0, 10.0)?;
        Ok((mu, logvar))
    }

    /// Deterministic encoding: the posterior mean.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.encode_dist(x, train)?.0)
    }

    pub fn decode(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self
            .dec_block
            .forward(&self.from_latent.forward(z)?, train)?;
        for st in &self.dec_stages {
            h = st.block.forward(&st.up.forward(&h)?, train)?;
        }
        Ok(self.conv_out.forward(&h)?)
    }

    pub fn complexity_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let widths = self.cfg.widths();
        let w0 = widths[0];
        let w_max = *widths.last().expect("nonempty widths");
        let c = self.cfg.latent_channels;
        let mut specs = vec![LayerSpec::Conv2d {
            kernel: 3,
            c_in: 3,
            c_out: w0,
            h_out: h,
            w_out: w,
        }];
        specs.extend(ResidualBlock::specs(w0, w0, h, w));
        let (mut hh, mut ww) = (h, w);
        for i in 0..self.cfg.n_down {
            hh /= 2;
            ww /= 2;
            specs.push(LayerSpec::Conv2d {
                kernel: 4,
                c_in: widths[i],
                c_out: widths[i + 1],
                h_out: hh,
                w_out: ww,
            });
            specs.extend(ResidualBlock::specs(widths[i + 1], widths[i + 1], hh, ww));
        }
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: w_max,
            c_out: 2 * c,
            h_out: hh,
            w_out: ww,
        });
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: c,
            c_out: w_max,
            h_out: hh,
            w_out: ww,
        });
        specs.extend(ResidualBlock::specs(w_max, w_max, hh, ww));
        for i in 0..self.cfg.n_down {
            hh *= 2;
            ww *= 2;
            let co = widths[self.cfg.n_down - i - 1];
            let ci = widths[self.cfg.n_down - i];
            specs.push(LayerSpec::Conv2d {
                kernel: 3,
                c_in: ci,
                c_out: co,
                h_out: hh,
                w_out: ww,
            });
            specs.extend(ResidualBlock::specs(co, co, hh, ww));
        }
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: w0,
            c_out: 3,
            h_out: h,
            w_out: w,
        });
        specs
    }
}

/// Either a learned autoencoder or an identity map (latents = pixels),
/// the latter for algebra tests.
pub enum Vae {
    Learned(VaeNet),
    Identity,
}

impl Vae {
    pub fn spatial_factor(&self) -> usize {
        match self {
            Vae::Learned(net) => net.cfg.spatial_factor(),
            Vae::Identity => 1,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Vae::Learned(net) => net.cfg.latent_channels,
            Vae::Identity => 3,
        }
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Vae::Learned(net) => net.encode(x, train),
            Vae::Identity => Ok(x.clone()),
        }
    }

    pub fn decode(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Vae::Learned(net) => net.decode(z, train),
            Vae::Identity => Ok(z.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn roundtrip_shapes() {
        let store = ParamStore::new(5, Device::Cpu, DType::F32);
        let cfg = VaeConfig {
            base_width: 4,
            latent_channels: 8,
            n_down: 2,
        };
        let vae = VaeNet::new(&store, &cfg, None).unwrap();
        let x = crate::nn::seeded_tensor(&[2, 3, 16, 16], 1, &Device::Cpu, DType::F32).unwrap();
        let (mu, logvar) = vae.encode_dist(&x, false).unwrap();
        assert_eq!(mu.dims(), &[2, 8, 4, 4]);
        assert_eq!(logvar.dims(), mu.dims());
        let y = vae.decode(&mu, false).unwrap();
        assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn indivisible_input_rejected() {
        let store = ParamStore::new(5, Device::Cpu, DType::F32);
        let vae = VaeNet::new(&store, &VaeConfig::toy(), None).unwrap();
        let x = crate::nn::seeded_tensor(&[1, 3, 15, 16], 1, &Device::Cpu, DType::F32).unwrap();
        assert!(vae.encode(&x, false).is_err());
    }

    #[test]
    fn identity_vae_is_exact() {
        let vae = Vae::Identity;
        let x = crate::nn::seeded_tensor(&[1, 3, 8, 8], 2, &Device::Cpu, DType::F32).unwrap();
        let z = vae.encode(&x, false).unwrap();
        let y = vae.decode(&z, false).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f32>().unwrap(), 0.0);
    }
}
