//! Convolutional and attention building blocks over the parameter store.

use candle_core::{Tensor, Var};

use crate::error::Result;

use super::store::{Init, ParamStore};
use super::LayerSpec;

/// 2d convolution over NCHW input, built from gather and matmul.
///
/// candle 0.9's CPU conv2d kernel misreads channels-first inputs as
/// channels-last whenever `c_in == h == w` (its layout check matches NHWC
/// strides), and 0.8 produced wrong weight gradients for batches > 1, so we
/// assemble the op from primitives with reliable backward passes instead.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, c_in_k, kh, kw) = weight.dims4()?;
    debug_assert_eq!(c_in, c_in_k);
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
            .pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let out_h = (hp - kh) / stride + 1;
    let out_w = (wp - kw) / stride + 1;
    let mut idx = Vec::with_capacity(out_h * out_w * kh * kw);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..kh {
                for kx in 0..kw {
                    idx.push(((oy * stride + ky) * wp + ox * stride + kx) as u32);
                }
            }
        }
    }
    let idx = Tensor::from_vec(idx, out_h * out_w * kh * kw, x.device())?;
    let cols = xp
        .reshape((b, c_in, hp * wp))?
        .index_select(&idx, 2)?
        .reshape((b, c_in, out_h * out_w, kh * kw))?
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b, out_h * out_w, c_in * kh * kw))?;
    let wf = weight
        .reshape((c_out, c_in * kh * kw))?
        .t()?
        .contiguous()?;
    let y = cols.broadcast_matmul(&wf)?;
    Ok(y.permute((0, 2, 1))?
        .contiguous()?
        .reshape((b, c_out, out_h, out_w))?)
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.tensor(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = store.tensor(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.c_out, 1, 1))?)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn spec(&self, h_out: usize, w_out: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            kernel: self.kernel,
            c_in: self.c_in,
            c_out: self.c_out,
            h_out,
            w_out,
        }
    }
}

pub struct Linear {
    weight: Tensor, // (out, in)
    bias: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = store.tensor(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Uniform { bound },
        )?;
        let bias = store.tensor(&format!("{name}.bias"), &[out_dim], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies to the last dimension; supports (B, D) and (B, N, D) inputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            3 => x.broadcast_matmul(&w)?,
            r => {
                return Err(crate::error::Error::shape("Linear input rank", "2 or 3", r));
            }
        };
        Ok(y.broadcast_add(&self.bias)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Batch normalization over (B, C, H, W) with explicit train/eval modes and
/// running statistics held as store variables so they persist in checkpoints.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.tensor(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?;
        let beta = store.tensor(&format!("{name}.beta"), &[channels], Init::Const(0.0))?;
        let running_mean = store.var(
            &format!("{name}.running_mean"),
            &[channels],
            Init::Const(0.0),
        )?;
        let running_var = store.var(
            &format!("{name}.running_var"),
            &[channels],
            Init::Const(1.0),
        )?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        debug_assert_eq!(c, self.channels);
        let n = (b * h * w) as f64;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            // batch statistics over (B, H, W)
            let xt = x.transpose(0, 1)?.reshape((c, ()))?;
            let mean = xt.mean_keepdim(1)?.reshape((c,))?;
            let centered = xt.broadcast_sub(&mean.reshape((c, 1))?)?;
            let var = centered.sqr()?.mean_keepdim(1)?.reshape((c,))?;
            // update running stats with the unbiased variance, detached
            let unbiased = if n > 1.0 {
                (&var * (n / (n - 1.0)))?
            } else {
                var.clone()
            };
            let rm = ((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                + (mean.detach() * self.momentum)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - self.momentum))?
                + (unbiased.detach() * self.momentum)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let x = x.broadcast_sub(&mean.reshape(shape)?)?;
        let x = x.broadcast_div(&(var.reshape(shape)? + self.eps)?.sqrt()?)?;
        let x = x.broadcast_mul(&self.gamma.reshape(shape)?)?;
        Ok(x.broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Stateless per-sample normalization over channel groups with learnable
/// affine. Identical in training and inference, so frozen-weight checksums
/// cover the whole layer.
pub struct GroupNorm2d {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm2d {
    pub fn new(store: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.tensor(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?;
        let beta = store.tensor(&format!("{name}.beta"), &[channels], Init::Const(0.0))?;
        let groups = (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        debug_assert_eq!(c, self.channels);
        let g = self.groups;
        let xg = x.reshape((b, g, c / g * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        let shape = (1, c, 1, 1);
        let normed = normed.broadcast_mul(&self.gamma.reshape(shape)?)?;
        Ok(normed.broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Two 3x3 convolutions with group normalization and ReLU, plus an identity
/// or 1x1-projected skip connection.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: GroupNorm2d,
    conv2: Conv2d,
    bn2: GroupNorm2d,
    skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(store: &ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1)?;
        let bn1 = GroupNorm2d::new(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1)?;
        let bn2 = GroupNorm2d::new(store, &format!("{name}.bn2"), c_out)?;
        let skip = if c_in != c_out {
            Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let _ = train; // normalization is stateless; kept for API symmetry
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?;
        let s = match &self.skip {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }

    pub fn specs(c_in: usize, c_out: usize, h: usize, w: usize) -> Vec<LayerSpec> {
        let mut specs = vec![
            LayerSpec::Conv2d {
                kernel: 3,
                c_in,
                c_out,
                h_out: h,
                w_out: w,
            },
            LayerSpec::ChannelAffine { channels: c_out },
            LayerSpec::Conv2d {
                kernel: 3,
                c_in: c_out,
                c_out,
                h_out: h,
                w_out: w,
            },
            LayerSpec::ChannelAffine { channels: c_out },
        ];
        if c_in != c_out {
            specs.push(LayerSpec::Conv2d {
                kernel: 1,
                c_in,
                c_out,
                h_out: h,
                w_out: w,
            });
        }
        specs
    }
}

/// 4x4 stride-2 downsampling convolution.
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(store: &ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, c_in, c_out, 4, 2, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }

    pub fn specs(c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::Conv2d {
            kernel: 4,
            c_in,
            c_out,
            h_out,
            w_out,
        }]
    }
}

/// Nearest-neighbour 2x upsample followed by a 3x3 convolution.
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(store: &ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, name, c_in, c_out, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(h * 2, w * 2)?;
        self.conv.forward(&up)
    }
}

/// Single-head cross-attention: queries from the feature map, keys/values
/// from an external (B, K, D_ctx) embedding sequence. Residual output.
pub struct CrossAttention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    dim: usize,
}

impl CrossAttention {
    pub fn new(store: &ParamStore, name: &str, dim: usize, ctx_dim: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(store, &format!("{name}.to_q"), dim, dim)?,
            to_k: Linear::new(store, &format!("{name}.to_k"), ctx_dim, dim)?,
            to_v: Linear::new(store, &format!("{name}.to_v"), ctx_dim, dim)?,
            to_out: Linear::new(store, &format!("{name}.to_out"), dim, dim)?,
            dim,
        })
    }

    /// x: (B, C, H, W) with C == dim; ctx: (B, K, ctx_dim).
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = super::tokens_from_map(x)?; // (B, HW, C)
        let q = self.to_q.forward(&tokens)?;
        let k = self.to_k.forward(ctx)?;
        let v = self.to_v.forward(ctx)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&scores, 2)?;
        let out = attn.matmul(&v)?;
        let out = self.to_out.forward(&out)?;
        let out = (out + tokens)?;
        Ok(out.transpose(1, 2)?.reshape((b, c, h, w))?)
    }

    pub fn specs(dim: usize, ctx_dim: usize, positions: usize, ctx_len: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                in_dim: dim,
                out_dim: dim,
                positions,
            },
            LayerSpec::Dense {
                in_dim: ctx_dim,
                out_dim: dim,
                positions: ctx_len,
            },
            LayerSpec::Dense {
                in_dim: ctx_dim,
                out_dim: dim,
                positions: ctx_len,
            },
            LayerSpec::MatMul {
                m: positions,
                k: dim,
                n: ctx_len,
            },
            LayerSpec::MatMul {
                m: positions,
                k: ctx_len,
                n: dim,
            },
            LayerSpec::Dense {
                in_dim: dim,
                out_dim: dim,
                positions,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(11, Device::Cpu, DType::F32)
    }

    #[test]
    fn conv_shapes() {
        let s = store();
        let conv = Conv2d::new(&s, "c", 3, 8, 3, 1, 1).unwrap();
        let x = crate::nn::seeded_tensor(&[2, 3, 16, 16], 0, s.device(), DType::F32).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 8, 16, 16]);

        let down = Downsample::new(&s, "d", 8, 16).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(down.forward(&y).unwrap().dims(), &[2, 16, 8, 8]);
    }

    #[test]
    fn batchnorm_train_normalizes_eval_uses_running() {
        let s = store();
        let bn = BatchNorm2d::new(&s, "bn", 4).unwrap();
        let x = crate::nn::seeded_tensor(&[3, 4, 5, 5], 1, s.device(), DType::F32).unwrap();
        let y = bn.forward(&x, true).unwrap();
        // per-channel mean of the normalized output is ~0
        let m = y
            .transpose(0, 1)
            .unwrap()
            .reshape((4, ()))
            .unwrap()
            .mean_keepdim(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
        // eval mode is deterministic and uses running stats
        let e1 = bn.forward(&x, false).unwrap();
        let e2 = bn.forward(&x, false).unwrap();
        let d = (e1 - e2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_vec0::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn residual_block_shape_and_determinism() {
        let s = store();
        let block = ResidualBlock::new(&s, "rb", 3, 8).unwrap();
        let x = crate::nn::seeded_tensor(&[1, 3, 8, 8], 2, s.device(), DType::F32).unwrap();
        let a = block.forward(&x, false).unwrap();
        let b = block.forward(&x, false).unwrap();
        assert_eq!(a.dims(), &[1, 8, 8, 8]);
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn cross_attention_preserves_shape_and_uses_context() {
        let s = store();
        let attn = CrossAttention::new(&s, "xa", 8, 6).unwrap();
        let x = crate::nn::seeded_tensor(&[2, 8, 4, 4], 3, s.device(), DType::F32).unwrap();
        let ctx1 = crate::nn::seeded_tensor(&[2, 5, 6], 4, s.device(), DType::F32).unwrap();
        let ctx2 = crate::nn::seeded_tensor(&[2, 5, 6], 5, s.device(), DType::F32).unwrap();
        let y1 = attn.forward(&x, &ctx1).unwrap();
        let y2 = attn.forward(&x, &ctx2).unwrap();
        assert_eq!(y1.dims(), x.dims());
        let diff = (y1 - y2)
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_vec0::<f32>()
            .unwrap();
        assert!(diff > 0.0, "context must influence the output");
    }
}
