//! Compression-aware visual embedder: multiscale encoder, QF predictor,
//! and skip-connected reconstruction decoder trained jointly.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Downsample, Linear, ResidualBlock, Upsample};
use crate::nn::store::ParamStore;
use crate::nn::{pool_tokens, tokens_from_map, LayerSpec};

/// Encoder widths are `base_width`·{1,2,4,8}; the embedding dimension is the
/// deepest width. `full()` matches the reference architecture, `toy()` is the
/// desk-scale 1/8 configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CaVEConfig {
    pub base_width: usize,
    pub predictor_hidden: usize,
}

impl CaVEConfig {
    pub fn full() -> Self {
        Self {
            base_width: 64,
            predictor_hidden: 512,
        }
    }

    pub fn toy() -> Self {
        Self {
            base_width: 8,
            predictor_hidden: 64,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    pub fn embed_dim(&self) -> usize {
        8 * self.base_width
    }
}

/// Encoder output: K×d embedding tokens (K = H/8 · W/8), their mean, the
/// deepest feature map, and the per-scale skips needed by the decoder.
pub struct CaVEFeatures {
    pub embeddings: Tensor,
    pub pooled: Tensor,
    pub map: Tensor,
    pub skips: Option<[Tensor; 3]>,
}

pub struct CaVE {
    pub cfg: CaVEConfig,
    stem: Conv2d,
    enc1: ResidualBlock,
    down1: Downsample,
    enc2: ResidualBlock,
    down2: Downsample,
    enc3: ResidualBlock,
    down3: Downsample,
    enc4: ResidualBlock,
    pconv1: Conv2d,
    pconv2: Conv2d,
    mlp1: Linear,
    mlp2: Linear,
    mlp3: Linear,
    up1: Upsample,
    dec1: ResidualBlock,
    up2: Upsample,
    dec2: ResidualBlock,
    up3: Upsample,
    dec3: ResidualBlock,
    out: Conv2d,
}

impl CaVE {
    pub fn new(store: &ParamStore, cfg: &CaVEConfig) -> Result<Self> {
        let [w0, w1, w2, w3] = cfg.widths();
        let h = cfg.predictor_hidden;
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(store, "cave.stem", 3, w0, 3, 1, 1)?,
            enc1: ResidualBlock::new(store, "cave.enc1", w0, w0)?,
            down1: Downsample::new(store, "cave.down1", w0, w1)?,
            enc2: ResidualBlock::new(store, "cave.enc2", w1, w1)?,
            down2: Downsample::new(store, "cave.down2", w1, w2)?,
            enc3: ResidualBlock::new(store, "cave.enc3", w2, w2)?,
            down3: Downsample::new(store, "cave.down3", w2, w3)?,
            enc4: ResidualBlock::new(store, "cave.enc4", w3, w3)?,
            pconv1: Conv2d::new(store, "cave.pred.conv1", w3, w3, 3, 1, 1)?,
            pconv2: Conv2d::new(store, "cave.pred.conv2", w3, w3, 3, 1, 1)?,
            mlp1: Linear::new(store, "cave.pred.mlp1", w3, h)?,
            mlp2: Linear::new(store, "cave.pred.mlp2", h, h)?,
            mlp3: Linear::new(store, "cave.pred.mlp3", h, 1)?,
            up1: Upsample::new(store, "cave.up1", w3, w2)?,
            dec1: ResidualBlock::new(store, "cave.dec1", w2, w2)?,
            up2: Upsample::new(store, "cave.up2", w2, w1)?,
            dec2: ResidualBlock::new(store, "cave.dec2", w1, w1)?,
            up3: Upsample::new(store, "cave.up3", w1, w0)?,
            dec3: ResidualBlock::new(store, "cave.dec3", w0, w0)?,
            out: Conv2d::new(store, "cave.out", w0, 3, 3, 1, 1)?,
        })
    }

    /// Forward encoder pass. Input (B, 3, H, W) with H, W divisible by 8.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<CaVEFeatures> {
        self.encode_opts(x, train, true)
    }

    pub fn encode_opts(&self, x: &Tensor, train: bool, with_skips: bool) -> Result<CaVEFeatures> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape("cave input channels", 3usize, c));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::domain(format!(
                "input {h}x{w} not divisible by the downsampling factor 8"
            )));
        }
        let s1 = self.enc1.forward(&self.stem.forward(x)?, train)?;
        let s2 = self.enc2.forward(&self.down1.forward(&s1)?, train)?;
        let s3 = self.enc3.forward(&self.down2.forward(&s2)?, train)?;
        let map = self.enc4.forward(&self.down3.forward(&s3)?, train)?;
        let embeddings = tokens_from_map(&map)?;
        let pooled = pool_tokens(&embeddings)?;
        Ok(CaVEFeatures {
            embeddings,
            pooled,
            map,
            skips: if with_skips { Some([s1, s2, s3]) } else { None },
        })
    }

    /// Scalar QF prediction per batch element, raw 1..100 scale (unclamped).
    pub fn predict_qf(&self, features: &CaVEFeatures) -> Result<Tensor> {
        let d = self.cfg.embed_dim();
        let (_, c, _, _) = features.map.dims4()?;
        if c != d {
            return Err(Error::shape("predictor input channels", d, c));
        }
        let h = self.pconv1.forward(&features.map)?.relu()?;
        let h = self.pconv2.forward(&h)?.relu()?;
        let pooled = h.mean(3)?.mean(2)?; // (B, d)
        let h = self.mlp1.forward(&pooled)?.relu()?;
        let h = self.mlp2.forward(&h)?.relu()?;
        let out = self.mlp3.forward(&h)?; // (B, 1)
        Ok(out.squeeze(1)?)
    }

    /// Decoder pass; requires the skips captured at encode time.
    pub fn reconstruct(&self, features: &CaVEFeatures, train: bool) -> Result<Tensor> {
        let skips = features
            .skips
            .as_ref()
            .ok_or_else(|| Error::domain("reconstruction requires encoder skips"))?;
        let [s1, s2, s3] = skips;
        let h = self.up1.forward(&features.map)?;
        let h = self.dec1.forward(&(h + s3)?, train)?;
        let h = self.up2.forward(&h)?;
        let h = self.dec2.forward(&(h + s2)?, train)?;
        let h = self.up3.forward(&h)?;
        let h = self.dec3.forward(&(h + s1)?, train)?;
        Ok(self.out.forward(&h)?)
    }

    /// Analytic layer shapes for complexity counting at input size (h, w).
    pub fn complexity_specs(&self, h: usize, w: usize) -> Vec<LayerSpec> {
        let [w0, w1, w2, w3] = self.cfg.widths();
        let hd = self.cfg.predictor_hidden;
        let (h2, w2_) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let (h8, w8) = (h / 8, w / 8);
        let mut specs = vec![LayerSpec::Conv2d {
            kernel: 3,
            c_in: 3,
            c_out: w0,
            h_out: h,
            w_out: w,
        }];
        specs.extend(ResidualBlock::specs(w0, w0, h, w));
        specs.extend(Downsample::specs(w0, w1, h2, w2_));
        specs.extend(ResidualBlock::specs(w1, w1, h2, w2_));
        specs.extend(Downsample::specs(w1, w2, h4, w4));
        specs.extend(ResidualBlock::specs(w2, w2, h4, w4));
        specs.extend(Downsample::specs(w2, w3, h8, w8));
        specs.extend(ResidualBlock::specs(w3, w3, h8, w8));
        for _ in 0..2 {
            specs.push(LayerSpec::Conv2d {
                kernel: 3,
                c_in: w3,
                c_out: w3,
                h_out: h8,
                w_out: w8,
            });
        }
        specs.push(LayerSpec::Dense {
            in_dim: w3,
            out_dim: hd,
            positions: 1,
        });
        specs.push(LayerSpec::Dense {
            in_dim: hd,
            out_dim: hd,
            positions: 1,
        });
        specs.push(LayerSpec::Dense {
            in_dim: hd,
            out_dim: 1,
            positions: 1,
        });
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: w3,
            c_out: w2,
            h_out: h4,
            w_out: w4,
        });
        specs.extend(ResidualBlock::specs(w2, w2, h4, w4));
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: w2,
            c_out: w1,
            h_out: h2,
            w_out: w2_,
        });
        specs.extend(ResidualBlock::specs(w1, w1, h2, w2_));
        specs.push(LayerSpec::Conv2d {
            kernel: 3,
            c_in: w1,
            c_out: w0,
            h_out: h,
            w_out: w,
        });
        specs.extend(ResidualBlock::specs(w0, w0, h, w));
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

/// Mean absolute QF prediction error over the batch.
pub fn loss_qf(preds: &Tensor, gts: &Tensor) -> Result<Tensor> {
    if preds.elem_count() == 0 {
        return Err(Error::domain("empty batch"));
    }
    if preds.dims() != gts.dims() {
        return Err(Error::shape(
            "qf loss",
            format!("{:?}", preds.dims()),
            format!("{:?}", gts.dims()),
        ));
    }
    Ok((preds - gts)?.abs()?.mean_all()?)
}

/// Mean absolute pixel error over the batch.
pub fn loss_rec(recons: &Tensor, hqs: &Tensor) -> Result<Tensor> {
    if recons.elem_count() == 0 {
        return Err(Error::domain("empty batch"));
    }
    if recons.dims() != hqs.dims() {
        return Err(Error::shape(
            "rec loss",
            format!("{:?}", recons.dims()),
            format!("{:?}", hqs.dims()),
        ));
    }
    Ok((recons - hqs)?.abs()?.mean_all()?)
}

/// Joint objective: (total, qf_component, rec_component) with
/// total = qf + λ·rec.
pub fn loss_cave(
    preds: &Tensor,
    gts: &Tensor,
    recons: &Tensor,
    hqs: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    if lambda < 0.0 {
        return Err(Error::domain("lambda must be non-negative"));
    }
    let qf = loss_qf(preds, gts)?;
    let rec = loss_rec(recons, hqs)?;
    let total = (&qf + (&rec * lambda)?)?;
    Ok((total, qf, rec))
}
