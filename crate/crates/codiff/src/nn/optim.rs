//! Adam/AdamW with serializable moment state, exact-resume capable.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero recovers plain Adam.
    pub weight_decay: f64,
    /// Global gradient-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(learning_rate)
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    cfg: AdamConfig,
    slots: BTreeMap<String, Slot>,
    step_count: usize,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in params {
            let m = var.zeros_like()?;
            let v = var.zeros_like()?;
            slots.insert(name, Slot { var, m, v });
        }
        Ok(Self {
            cfg,
            slots,
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn device(&self) -> &candle_core::Device {
        static CPU: candle_core::Device = candle_core::Device::Cpu;
        self.slots
            .values()
            .next()
            .map(|s| s.var.device())
            .unwrap_or(&CPU)
    }

    /// Applies one update from the gradients; parameters without a gradient
    /// (e.g. batch-norm running statistics) are left untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq_sum = 0.0f64;
        for slot in self.slots.values() {
            if let Some(g) = grads.get(&slot.var) {
                sq_sum += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_vec0::<f64>()?;
            }
        }
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm = {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(&slot.var) else {
                continue;
            };
            let g = (g * scale)?.detach();
            slot.m = ((&slot.m * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            slot.v = ((&slot.v * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let mut next = (slot.var.as_tensor() - (update * self.cfg.learning_rate)?)?;
            if self.cfg.weight_decay > 0.0 {
                next = (next
                    - (slot.var.as_tensor() * (self.cfg.learning_rate * self.cfg.weight_decay))?)?;
            }
            slot.var.set(&next)?;
        }
        Ok(norm)
    }

    /// Moment tensors keyed for checkpointing.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("adam_m.{name}"), slot.m.clone());
            out.insert(format!("adam_v.{name}"), slot.v.clone());
        }
        out
    }

    /// Restores moments and step counter saved by [`Self::state_tensors`].
    pub fn load_state(
        &mut self,
        tensors: &HashMap<String, Tensor>,
        step_count: usize,
    ) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let m = tensors.get(&format!("adam_m.{name}")).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer moment missing for `{name}`"))
            })?;
            let v = tensors.get(&format!("adam_v.{name}")).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer moment missing for `{name}`"))
            })?;
            if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::shape(
                    format!("optimizer state `{name}`"),
                    format!("{:?}", slot.var.dims()),
                    format!("{:?} / {:?}", m.dims(), v.dims()),
                ));
            }
            slot.m = m.to_dtype(slot.var.dtype())?;
            slot.v = v.to_dtype(slot.var.dtype())?;
        }
        self.step_count = step_count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn adam_minimizes_quadratic() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(vec![5.0f64, -3.0], (2,), &dev).unwrap())
            .unwrap();
        let mut opt = Adam::new(
            vec![("x".into(), x.clone())],
            AdamConfig {
                learning_rate: 0.1,
                clip_norm: None,
                ..AdamConfig::adam(0.1)
            },
        )
        .unwrap();
        for _ in 0..200 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads).unwrap();
        }
        let vals = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!(vals.iter().all(|v| v.abs() < 1e-2), "{vals:?}");
    }

    #[test]
    fn grad_clipping_bounds_update() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(vec![1e6f64], (1,), &dev).unwrap()).unwrap();
        let mut opt = Adam::new(
            vec![("x".into(), x.clone())],
            AdamConfig::adam(0.1),
        )
        .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let norm = opt.step(&grads).unwrap();
        assert!(norm > 1.0, "pre-clip norm reported");
    }

    #[test]
    fn state_roundtrip_resumes_exactly() {
        let dev = Device::Cpu;
        let make = || {
            Var::from_tensor(&Tensor::from_vec(vec![2.0f64, -1.0], (2,), &dev).unwrap()).unwrap()
        };
        let run = |var: &Var, steps: usize, opt: &mut Adam| {
            for _ in 0..steps {
                let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                opt.step(&grads).unwrap();
            }
        };

        // uninterrupted: 10 steps
        let a = make();
        let mut opt_a = Adam::new(vec![("x".into(), a.clone())], AdamConfig::adam(0.05)).unwrap();
        run(&a, 10, &mut opt_a);

        // interrupted: 4 steps, snapshot, resume 6 steps
        let b = make();
        let mut opt_b = Adam::new(vec![("x".into(), b.clone())], AdamConfig::adam(0.05)).unwrap();
        run(&b, 4, &mut opt_b);
        let state = opt_b.state_tensors();
        let steps = opt_b.step_count();
        let saved = b.as_tensor().copy().unwrap();

        let c = Var::from_tensor(&saved).unwrap();
        let mut opt_c = Adam::new(vec![("x".into(), c.clone())], AdamConfig::adam(0.05)).unwrap();
        opt_c.load_state(&state, steps).unwrap();
        run(&c, 6, &mut opt_c);

        assert_eq!(
            a.as_tensor().to_vec1::<f64>().unwrap(),
            c.as_tensor().to_vec1::<f64>().unwrap()
        );
    }
}
