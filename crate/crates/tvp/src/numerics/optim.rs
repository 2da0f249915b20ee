//! AdamW and the cosine learning-rate schedule.

use std::collections::HashMap;

use super::store::ParamStore;
use super::tensor::{real, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-2 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW over the trainable subset of a store. Moment state is keyed by
/// parameter name and kept in f64 regardless of the model scalar.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, state: HashMap::new() }
    }

    /// One update over every trainable parameter that accumulated a
    /// gradient this step. Gradients are consumed.
    pub fn step<S: Scalar>(&mut self, store: &ParamStore<S>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for name in store.trainable_names() {
            let tensor = store.get(&name)?;
            let Some(grad) = tensor.grad() else { continue };
            let n = tensor.len();
            let slot = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let mut data: Vec<f64> = tensor
                .data()
                .iter()
                .map(|&x| num_traits::ToPrimitive::to_f64(&x).unwrap_or(f64::NAN))
                .collect();
            for i in 0..n {
                let g = num_traits::ToPrimitive::to_f64(&grad[i]).unwrap_or(f64::NAN);
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in {name}")));
                }
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[i]);
            }
            store.update(&name, tensor.dims().to_vec(), data.into_iter().map(real::<S>).collect());
        }
        Ok(())
    }
}

/// Cosine decay to zero with a linear warmup fraction at the start.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = (total_steps as f64 * warmup_frac) as usize;
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{mul, sum_all};
    use crate::numerics::store::digest_params;

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        store.insert("p", vec![2], vec![3.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss_of = |s: &ParamStore<f32>| {
            let p = s.get("p").unwrap();
            sum_all(&mul(&p, &p).unwrap())
        };
        let first = loss_of(&store).item();
        for _ in 0..200 {
            store.clear_grads();
            let loss = loss_of(&store);
            loss.backward();
            opt.step(&store, 5e-2).unwrap();
        }
        let last = loss_of(&store).item();
        assert!(last < first * 0.05, "{first} -> {last}");
    }

    #[test]
    fn frozen_parameters_are_bit_identical_across_steps() {
        let mut store = ParamStore::<f32>::new();
        store.insert("train", vec![2], vec![1.0, 2.0]);
        store.insert("frozen", vec![2], vec![0.25, -0.75]);
        store.set_frozen("frozen", true);
        let before = digest_params(&store, &["frozen".into()]);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..25 {
            store.clear_grads();
            let a = store.get("train").unwrap();
            let b = store.get("frozen").unwrap();
            let loss = sum_all(&mul(&a, &b).unwrap());
            loss.backward();
            opt.step(&store, 1e-2).unwrap();
        }
        assert_eq!(before, digest_params(&store, &["frozen".into()]));
        // and the trainable one actually moved
        assert_ne!(store.get("train").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cosine_lr_warms_up_and_decays_to_zero() {
        let total = 1000;
        let lr0 = cosine_lr(1e-3, 0, total, 0.05);
        assert!(lr0 < 1e-3 * 0.05);
        let lr_mid = cosine_lr(1e-3, 500, total, 0.05);
        assert!(lr_mid < 1e-3 && lr_mid > 1e-4);
        let lr_end = cosine_lr(1e-3, 999, total, 0.05);
        assert!(lr_end < 2e-5);
        for s in 1..total {
            assert!(cosine_lr(1e-3, s, total, 0.05) >= 0.0);
        }
    }
}
