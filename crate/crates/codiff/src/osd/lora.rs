//! Low-rank weight adaptation: delta = scale·B·A applied on top of frozen
//! base weights, unmaterialized during training with an explicit merge step.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::layers::conv2d;
use crate::nn::store::{Init, ParamStore};

pub const DEFAULT_RANK: usize = 16;

/// Adapter over an m×n base weight. `down` (A) is r×n, `up` (B) is m×r and
/// zero-initialized so a fresh adapter is an exact no-op.
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub scale: f64,
    pub m: usize,
    pub n: usize,
}

impl LoraAdapter {
    pub fn new(store: &ParamStore, name: &str, m: usize, n: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::domain(format!(
                "lora rank {rank} invalid for {m}x{n} base weight"
            )));
        }
        let down = store.tensor(
            &format!("{name}.lora_a"),
            &[rank, n],
            Init::KaimingUniform { fan_in: n },
        )?;
        let up = store.tensor(&format!("{name}.lora_b"), &[m, rank], Init::Const(0.0))?;
        Ok(Self {
            down,
            up,
            rank,
            scale: 1.0 / rank as f64,
            m,
            n,
        })
    }

    /// scale·B·A, materialized (inference/export path only).
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.up.matmul(&self.down)? * self.scale)?)
    }

    /// base + scale·B·A for an m×n base weight.
    pub fn merge(&self, base: &Tensor) -> Result<Tensor> {
        if base.dims() != [self.m, self.n] {
            return Err(Error::shape(
                "lora merge base",
                format!("[{}, {}]", self.m, self.n),
                format!("{:?}", base.dims()),
            ));
        }
        Ok((base + self.delta()?)?)
    }

    /// (base + scale·B·A)·x without forming the merged weight: the low-rank
    /// path is evaluated as scale·B·(A·x). `x` is n×p column data.
    pub fn apply(&self, base: &Tensor, x: &Tensor) -> Result<Tensor> {
        if base.dims() != [self.m, self.n] {
            return Err(Error::shape(
                "lora apply base",
                format!("[{}, {}]", self.m, self.n),
                format!("{:?}", base.dims()),
            ));
        }
        let main = base.matmul(x)?;
        let low = self.up.matmul(&self.down.matmul(x)?)?;
        Ok((main + (low * self.scale)?)?)
    }
}

/// Linear layer whose effective weight is base + scale·B·A; the low-rank
/// path stays factored during forward passes.
pub struct LoraLinear {
    pub base: crate::nn::layers::Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        adapters: Option<(&ParamStore, usize)>,
    ) -> Result<Self> {
        let base = crate::nn::layers::Linear::new(store, name, in_dim, out_dim)?;
        let adapter = match adapters {
            Some((ad_store, rank)) => {
                Some(LoraAdapter::new(ad_store, name, out_dim, in_dim, rank)?)
            }
            None => None,
        };
        Ok(Self { base, adapter })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        let Some(ad) = &self.adapter else {
            return Ok(y);
        };
        // x·Aᵀ·Bᵀ·scale, applied to the last dimension
        let a_t = ad.down.t()?;
        let b_t = ad.up.t()?;
        let low = match x.rank() {
            2 => x.matmul(&a_t)?.matmul(&b_t)?,
            3 => x.broadcast_matmul(&a_t)?.broadcast_matmul(&b_t)?,
            r => return Err(Error::shape("LoraLinear input rank", "2 or 3", r)),
        };
        Ok((y + (low * ad.scale)?)?)
    }

    /// base + scale·B·A as a dense (out, in) weight for export.
    pub fn merged_weight(&self) -> Result<Tensor> {
        match &self.adapter {
            Some(ad) => ad.merge(self.base.weight()),
            None => Ok(self.base.weight().clone()),
        }
    }
}

/// Convolution with an optional low-rank delta: the A factor is a k×k
/// convolution down to `rank` channels, the B factor a 1×1 convolution back
/// up. Flattened to matrices this is exactly base + scale·B·A.
pub struct LoraConv2d {
    pub base: crate::nn::layers::Conv2d,
    adapter: Option<ConvAdapter>,
}

struct ConvAdapter {
    down: Tensor, // (r, c_in, k, k)
    up: Tensor,   // (c_out, r, 1, 1)
    rank: usize,
    scale: f64,
}

impl LoraConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        adapters: Option<(&ParamStore, usize)>,
    ) -> Result<Self> {
        let base =
            crate::nn::layers::Conv2d::new(store, name, c_in, c_out, kernel, stride, padding)?;
        let adapter = match adapters {
            Some((ad_store, rank)) => {
                let n = c_in * kernel * kernel;
                if rank == 0 || rank > c_out.min(n) {
                    return Err(Error::domain(format!(
                        "lora rank {rank} invalid for {c_out}x{n} conv weight"
                    )));
                }
                let down = ad_store.tensor(
                    &format!("{name}.lora_a"),
                    &[rank, c_in, kernel, kernel],
                    Init::KaimingUniform { fan_in: n },
                )?;
                let up = ad_store.tensor(
                    &format!("{name}.lora_b"),
                    &[c_out, rank, 1, 1],
                    Init::Const(0.0),
                )?;
                Some(ConvAdapter {
                    down,
                    up,
                    rank,
                    scale: 1.0 / rank as f64,
                })
            }
            None => None,
        };
        Ok(Self { base, adapter })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.base.forward(x)?;
        let Some(ad) = &self.adapter else {
            return Ok(y);
        };
        let low = conv2d(x, &ad.down, self.base.padding(), self.base.stride())?;
        let low = conv2d(&low, &ad.up, 0, 1)?;
        Ok((y + (low * ad.scale)?)?)
    }

    /// base + scale·B·A as a dense (c_out, c_in, k, k) kernel for export.
    pub fn merged_weight(&self) -> Result<Tensor> {
        let w = self.base.weight();
        let Some(ad) = &self.adapter else {
            return Ok(w.clone());
        };
        let (c_out, c_in, k, _) = w.dims4()?;
        let a = ad.down.reshape((ad.rank, c_in * k * k))?;
        let b = ad.up.reshape((c_out, ad.rank))?;
        let delta = (b.matmul(&a)? * ad.scale)?.reshape((c_out, c_in, k, k))?;
        Ok((w + delta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};
    use nalgebra::DMatrix;

    fn store() -> ParamStore {
        ParamStore::new(42, Device::Cpu, DType::F64)
    }

    #[test]
    fn zero_init_b_is_exact_noop() {
        let s = store();
        let ad = LoraAdapter::new(&s, "w", 6, 5, 3).unwrap();
        let base = crate::nn::seeded_tensor(&[6, 5], 7, &Device::Cpu, DType::F64).unwrap();
        let x = crate::nn::seeded_tensor(&[5, 4], 8, &Device::Cpu, DType::F64).unwrap();
        let with = ad.apply(&base, &x).unwrap();
        let without = base.matmul(&x).unwrap();
        let d = (with - without).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn merge_matches_dense_product_oracle() {
        let s = store();
        let ad = LoraAdapter::new(&s, "w", 4, 3, 2).unwrap();
        // give B nonzero content
        let b = crate::nn::seeded_tensor(&[4, 2], 9, &Device::Cpu, DType::F64).unwrap();
        let up_var = s.var("w.lora_b", &[4, 2], Init::Const(0.0)).unwrap();
        up_var.set(&b).unwrap();

        let base = crate::nn::seeded_tensor(&[4, 3], 10, &Device::Cpu, DType::F64).unwrap();
        let merged = ad.merge(&base).unwrap();

        let a_v = ad.down.to_vec2::<f64>().unwrap();
        let b_v = ad.up.to_vec2::<f64>().unwrap();
        let base_v = base.to_vec2::<f64>().unwrap();
        let got = merged.to_vec2::<f64>().unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut dot = 0.0;
                for r in 0..2 {
                    dot += b_v[i][r] * a_v[r][j];
                }
                let expect = base_v[i][j] + ad.scale * dot;
                assert!((got[i][j] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_rank_fits_any_delta_by_least_squares() {
        let s = store();
        let m = 7usize;
        let n = 5usize;
        let r = m.min(n);
        let mut ad = LoraAdapter::new(&s, "w", m, n, r).unwrap();
        ad.scale = 1.0;

        let target = crate::nn::seeded_tensor(&[m, n], 21, &Device::Cpu, DType::F64).unwrap();
        let a = ad.down.to_vec2::<f64>().unwrap();
        // solve B·A = target for B: B = target·Aᵀ·(A·Aᵀ)⁻¹
        let a_m = DMatrix::from_fn(r, n, |i, j| a[i][j]);
        let t_v = target.to_vec2::<f64>().unwrap();
        let t_m = DMatrix::from_fn(m, n, |i, j| t_v[i][j]);
        let gram = &a_m * a_m.transpose();
        let b_m = &t_m * a_m.transpose() * gram.try_inverse().expect("gram invertible");
        let b_flat: Vec<f64> = (0..m).flat_map(|i| (0..r).map(move |j| (i, j))).map(|(i, j)| b_m[(i, j)]).collect();
        let b_t = Tensor::from_vec(b_flat, (m, r), &Device::Cpu).unwrap();
        s.var("w.lora_b", &[m, r], Init::Const(0.0))
            .unwrap()
            .set(&b_t)
            .unwrap();

        let zero = Tensor::zeros((m, n), DType::F64, &Device::Cpu).unwrap();
        let fitted = ad.merge(&zero).unwrap();
        let err = (fitted - target)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_vec0::<f64>()
            .unwrap();
        assert!(err < 1e-4, "least-squares fit error {err}");
    }

    #[test]
    fn rank_above_min_dim_rejected() {
        let s = store();
        assert!(LoraAdapter::new(&s, "w", 4, 3, 4).is_err());
    }

    #[test]
    fn conv_factored_path_matches_merged_kernel() {
        let base_store = store();
        let ad_store = ParamStore::new(99, Device::Cpu, DType::F64);
        let conv = LoraConv2d::new(&base_store, "c", 3, 5, 3, 1, 1, Some((&ad_store, 2))).unwrap();

        // give B nonzero content through the shared-storage var
        let b = crate::nn::seeded_tensor(&[5, 2, 1, 1], 13, &Device::Cpu, DType::F64).unwrap();
        ad_store
            .var("c.lora_b", &[5, 2, 1, 1], Init::Const(0.0))
            .unwrap()
            .set(&b)
            .unwrap();

        let x = crate::nn::seeded_tensor(&[1, 3, 6, 6], 14, &Device::Cpu, DType::F64).unwrap();
        let factored = conv.forward(&x).unwrap();
        let merged = conv.merged_weight().unwrap();
        let direct = conv2d(&x, &merged, 1, 1)
            .unwrap()
            .broadcast_add(
                &base_store
                    .tensor("c.bias", &[5], Init::Const(0.0))
                    .unwrap()
                    .reshape((1, 5, 1, 1))
                    .unwrap(),
            )
            .unwrap();
        let d = (factored - direct)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_vec0::<f64>()
            .unwrap();
        assert!(d < 1e-10, "factored vs merged diff {d}");
    }

    #[test]
    fn linear_without_adapter_equals_base() {
        let s = store();
        let lin = LoraLinear::new(&s, "l", 4, 6, None).unwrap();
        let x = crate::nn::seeded_tensor(&[2, 4], 15, &Device::Cpu, DType::F64).unwrap();
        let a = lin.forward(&x).unwrap();
        let b = lin.base.forward(&x).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_vec0::<f64>().unwrap(), 0.0);
    }
}
