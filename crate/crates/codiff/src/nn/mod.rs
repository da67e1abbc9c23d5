//! Shared network building blocks, optimizer, and complexity specs.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Layer shapes used for analytic parameter/MAC counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// k×k convolution producing an `h_out`×`w_out` map.
    Conv2d {
        kernel: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
    },
    /// Dense in_dim→out_dim applied at `positions` spatial/token positions.
    Dense {
        in_dim: usize,
        out_dim: usize,
        positions: usize,
    },
    /// Plain matrix product (m×k)·(k×n), e.g. attention score/value maps.
    MatMul { m: usize, k: usize, n: usize },
    /// Channelwise affine (batch norm at inference); parameters only.
    ChannelAffine { channels: usize },
    /// A layer kind without an analytic cost model; complexity counting
    /// rejects it by name.
    Opaque { kind: String },
}

/// Flattens a (B, C, H, W) feature map to (B, H*W, C) token sequences.
pub fn tokens_from_map(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Mean over the token axis of a (B, K, D) sequence.
pub fn pool_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(1)?)
}

/// Scalar extraction helper for logging.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}

/// Uniform-on-sphere-ish deterministic init noise for test fixtures.
pub fn seeded_tensor(shape: &[usize], seed: u64, device: &Device, dtype: DType) -> Result<Tensor> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
