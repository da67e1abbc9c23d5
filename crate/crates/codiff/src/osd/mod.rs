//! One-step latent restoration: schedule algebra, VAE, conditioned UNet,
//! and low-rank adaptation.

pub mod lora;
pub mod schedule;
pub mod unet;
pub mod vae;

use candle_core::Tensor;

use crate::cave::CaVE;
use crate::error::{Error, Result};
use crate::image::ImagePatch;

pub use lora::{LoraAdapter, LoraConv2d, LoraLinear, DEFAULT_RANK};
pub use schedule::{
    build_schedule, forward_diffuse, one_step_restore, schedule_from_betas, DiffusionSchedule,
};
pub use unet::{UNet, UNetConfig};
pub use vae::{Vae, VaeConfig, VaeNet};

/// The full restorer: latent autoencoder, conditioned noise predictor, and
/// the restoration step index baked into `schedule`.
pub struct Generator {
    pub vae: Vae,
    pub unet: UNet,
    pub schedule: DiffusionSchedule,
}

impl Generator {
    /// Latent-space restoration used by both training and inference:
    /// encode, predict noise once, invert in closed form.
    pub fn restore_latent(&self, x: &Tensor, ctx: &Tensor, train: bool) -> Result<Tensor> {
        let z_l = self.vae.encode(x, train)?;
        let eps_hat = self.unet.forward(&z_l, ctx, train)?;
        one_step_restore(&z_l, &eps_hat, &self.schedule)
    }

    /// Image-space restoration pipeline (inference mode throughout).
    pub fn generate(&self, lq: &ImagePatch, cave: &CaVE) -> Result<ImagePatch> {
        let f = self.vae.spatial_factor();
        if lq.height() % f != 0 || lq.width() % f != 0 {
            return Err(Error::domain(format!(
                "input {}x{} not divisible by the VAE spatial factor {f}",
                lq.height(), lq.width()
            )));
        }
        let x = lq
            .to_tensor(self.device(), candle_core::DType::F32)?
            .unsqueeze(0)?;
        let ctx = cave.encode_opts(&x, false, false)?.embeddings;
        let z_hat = self.restore_latent(&x, &ctx, false)?;
        let out = self.vae.decode(&z_hat, false)?.clamp(0.0, 1.0)?;
        ImagePatch::from_tensor(&out.squeeze(0)?)
    }

    fn device(&self) -> &candle_core::Device {
        &candle_core::Device::Cpu
    }
}
