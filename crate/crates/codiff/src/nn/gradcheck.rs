//! Central finite-difference gradient verification, used by the test suites.

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Compares the analytic gradient of `loss_fn` w.r.t. `var` against central
/// finite differences on `n_coords` randomly chosen coordinates. Returns the
/// maximum relative error. `loss_fn` must re-evaluate from the current value
/// of `var` on each call.
pub fn finite_diff_max_rel_err(
    loss_fn: &dyn Fn() -> Result<Tensor>,
    var: &Var,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let loss = loss_fn()?;
    if loss.rank() != 0 {
        return Err(Error::domain("gradcheck loss must be a scalar"));
    }
    let grads = loss.backward()?;
    let analytic = match grads.get(var) {
        Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        None => vec![0.0; var.elem_count()],
    };

    let base = var
        .as_tensor()
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    let shape = var.dims().to_vec();
    let dtype = var.dtype();
    let device = var.device().clone();

    let mut idx: Vec<usize> = (0..base.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n_coords);

    let set = |vals: &[f64]| -> Result<()> {
        let t = Tensor::from_vec(vals.to_vec(), shape.as_slice(), &device)?.to_dtype(dtype)?;
        var.set(&t)?;
        Ok(())
    };

    let mut max_rel: f64 = 0.0;
    for &i in &idx {
        let mut plus = base.clone();
        plus[i] += h;
        set(&plus)?;
        let f_plus = loss_fn()?.to_dtype(DType::F64)?.to_vec0::<f64>()?;

        let mut minus = base.clone();
        minus[i] -= h;
        set(&minus)?;
        let f_minus = loss_fn()?.to_dtype(DType::F64)?.to_vec0::<f64>()?;

        set(&base)?;

        let fd = (f_plus - f_minus) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (fd - analytic[i]).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
