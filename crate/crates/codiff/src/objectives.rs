//! Stage-2 training objectives: perceptual (L2 + DISTS), latent
//! discriminator, and non-saturating GAN losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Downsample, Linear, ResidualBlock};
use crate::nn::store::ParamStore;
use crate::nn::seeded_tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// DISTS weight in the perceptual loss.
    pub lambda_d: f64,
    /// GAN weight in the total generator loss.
    pub lambda_g: f64,
    /// Reconstruction weight in the embedder loss.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_g: 5e-3,
            lambda: 1000.0,
        }
    }
}

/// Frozen multiscale feature pyramid for DISTS: the raw image plus four
/// seeded random convolution stages, each ReLU + 2x average pool. Weights
/// are plain tensors, never trained.
pub struct DistsExtractor {
    kernels: Vec<Tensor>,
}

impl DistsExtractor {
    pub const WIDTHS: [usize; 4] = [8, 12, 16, 20];

    pub fn new(seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let mut kernels = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in Self::WIDTHS.iter().enumerate() {
            let k = seeded_tensor(&[c_out, c_in, 3, 3], seed ^ (i as u64 + 1), device, dtype)?;
            // scale so activations neither explode nor vanish across stages
            let k = (k * (2.0 / (9.0 * c_in as f64)).sqrt())?;
            kernels.push(k);
            c_in = c_out;
        }
        Ok(Self { kernels })
    }

    /// Feature maps at 1 + len(kernels) scales, the input being scale 0.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![x.clone()];
        let mut h = x.clone();
        for k in &self.kernels {
            h = crate::nn::layers::conv2d(&h, k, 1, 1)?.relu()?;
            h = h.avg_pool2d(2)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn channel_stats(f: &Tensor) -> Result<(Tensor, Tensor)> {
    // (B, C) spatial mean and variance per channel
    let mu = f.mean(3)?.mean(2)?;
    let (b, c, _, _) = f.dims4()?;
    let centered = f.broadcast_sub(&mu.reshape((b, c, 1, 1))?)?;
    let var = centered.sqr()?.mean(3)?.mean(2)?;
    Ok((mu, var))
}

/// DISTS distance in [0, 1]: 1 minus the uniformly weighted mean of texture
/// and structure similarity terms over all scales and channels.
pub fn dists(x: &Tensor, y: &Tensor, extractor: &DistsExtractor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape(
            "dists",
            format!("{:?}", x.dims()),
            format!("{:?}", y.dims()),
        ));
    }
    const C1: f64 = 1e-6;
    const C2: f64 = 1e-6;
    let fx = extractor.features(x)?;
    let fy = extractor.features(y)?;
    let mut terms: Vec<Tensor> = Vec::new();
    for (a, b) in fx.iter().zip(fy.iter()) {
        let (mu_x, var_x) = channel_stats(a)?;
        let (mu_y, var_y) = channel_stats(b)?;
        let (bs, c, _, _) = a.dims4()?;
        let cen_x = a.broadcast_sub(&mu_x.reshape((bs, c, 1, 1))?)?;
        let cen_y = b.broadcast_sub(&mu_y.reshape((bs, c, 1, 1))?)?;
        let cov = (cen_x * cen_y)?.mean(3)?.mean(2)?;

        let texture = (((&mu_x * &mu_y)? * 2.0)? + C1)?
            .div(&((mu_x.sqr()? + mu_y.sqr()?)? + C1)?)?;
        let structure = ((cov * 2.0)? + C2)?.div(&((var_x + var_y)? + C2)?)?;
        // each term is at most 1; clamp the lower end so anti-correlated
        // features cannot push the distance above 1
        terms.push(texture.clamp(0.0, 1.0)?.mean(1)?);
        terms.push(structure.clamp(0.0, 1.0)?.mean(1)?);
    }
    let n = terms.len() as f64;
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = (acc + t)?;
    }
    let sim = (acc / n)?; // (B,)
    Ok((1.0 - sim.mean_all()?)?)
}

/// L_per = MSE + λ_D·DISTS. Returns (total, l2, dists).
pub fn loss_perceptual(
    pred: &Tensor,
    target: &Tensor,
    weights: &LossWeights,
    extractor: &DistsExtractor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "loss_perceptual",
            format!("{:?}", pred.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    let l2 = (pred - target)?.sqr()?.mean_all()?;
    let d = dists(pred, target, extractor)?;
    let total = (&l2 + (&d * weights.lambda_d)?)?;
    Ok((total, l2, d))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub mlp_hidden: usize,
}

impl DiscriminatorConfig {
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: 16,
            mlp_hidden: 64,
        }
    }
}

/// Latent-space critic: a UNet-style encoder followed by a small MLP head
/// with sigmoid output.
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    conv_in: Conv2d,
    block1: ResidualBlock,
    down1: Downsample,
    block2: ResidualBlock,
    mlp1: Linear,
    mlp2: Linear,
}

impl Discriminator {
    pub fn new(store: &ParamStore, cfg: &DiscriminatorConfig) -> Result<Self> {
        let w = cfg.base_width;
        Ok(Self {
            cfg: cfg.clone(),
            conv_in: Conv2d::new(store, "disc.conv_in", cfg.in_channels, w, 3, 1, 1)?,
            block1: ResidualBlock::new(store, "disc.block1", w, w)?,
            down1: Downsample::new(store, "disc.down1", w, 2 * w)?,
            block2: ResidualBlock::new(store, "disc.block2", 2 * w, 2 * w)?,
            mlp1: Linear::new(store, "disc.mlp1", 2 * w, cfg.mlp_hidden)?,
            mlp2: Linear::new(store, "disc.mlp2", cfg.mlp_hidden, 1)?,
        })
    }

    /// Probability in (0,1) per batch element for latents (B, c, h, w).
    pub fn forward(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(
                "discriminator input channels",
                self.cfg.in_channels,
                c,
            ));
        }
        let h = self.block1.forward(&self.conv_in.forward(z)?, train)?;
        let h = self.block2.forward(&self.down1.forward(&h)?, train)?;
        let pooled = h.mean(3)?.mean(2)?;
        let h = self.mlp1.forward(&pooled)?.relu()?;
        let logits = self.mlp2.forward(&h)?.squeeze(1)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }
}

fn clamp_probs(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Non-saturating GAN losses: L_G = −E[log D(fake)],
/// L_D = −E[log(1−D(fake))] − E[log D(real)]. The caller is responsible for
/// detaching the opposite path (stop-gradient contract).
pub fn loss_gan(d_fake: &Tensor, d_real: &Tensor) -> Result<(Tensor, Tensor)> {
    if d_fake.elem_count() == 0 || d_real.elem_count() == 0 {
        return Err(Error::domain("empty batch"));
    }
    let pf = clamp_probs(d_fake)?;
    let pr = clamp_probs(d_real)?;
    let gen = pf.log()?.mean_all()?.neg()?;
    let disc = ((1.0 - &pf)?.log()?.mean_all()?.neg()? + pr.log()?.mean_all()?.neg()?)?;
    Ok((gen, disc))
}

/// Eq.-style composition: L = L_per + λ_G·L_G. Returns
/// (total, l2, dists, gan_g).
pub fn loss_total_generator(
    pred: &Tensor,
    target: &Tensor,
    d_fake: &Tensor,
    weights: &LossWeights,
    extractor: &DistsExtractor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (l_per, l2, d) = loss_perceptual(pred, target, weights, extractor)?;
    let dummy_real = d_fake.detach(); // generator loss ignores the real term
    let (gan_g, _) = loss_gan(d_fake, &dummy_real)?;
    let total = (&l_per + (&gan_g * weights.lambda_g)?)?;
    Ok((total, l2, d, gan_g))
}
