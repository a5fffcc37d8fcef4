use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, TensorRole};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based) over aligned slices.
pub fn adam_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..p.len() {
        let gi = g[i].as_f64();
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        p[i] = T::from_f64(p[i].as_f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

/// Adam moments for the named parameters of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `module` that has an entry in `grads`.
    /// Any non-finite gradient aborts the whole step before anything moves.
    pub fn step(
        &mut self,
        module: &mut dyn Module,
        grads: &HashMap<String, Vec<f32>>,
    ) -> Result<()> {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            if let Some(i) = grads[name].iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] = {} at step {}",
                    grads[name][i],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let (t, cfg) = (self.t, self.cfg);
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut(&mut |name, role, p| {
            if role != TensorRole::Param {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            adam_update(p.data_mut(), g, m.data_mut(), v.data_mut(), t, &cfg);
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::with_lr(0.1);
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[0.5], &mut m, &mut v, 1, &cfg);
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-12);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_zero_lr() {
        let (mut p, mut m, mut v) = ([3.0f64], [0.0], [0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, &AdamConfig::with_lr(0.1));
        assert_eq!(p[0], 3.0);
        adam_update(&mut p, &[2.0], &mut m, &mut v, 2, &AdamConfig::with_lr(0.0));
        assert_eq!(p[0], 3.0);
        assert!(m[0] > 0.0 && v[0] > 0.0);
    }

    #[test]
    fn matches_hand_recurrence_over_steps() {
        let cfg = AdamConfig::with_lr(0.01);
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (mut p, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        let (mut rp, mut rm, mut rv) = (0.5f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = i as u64 + 1;
            adam_update(&mut p, &[g], &mut m, &mut v, t, &cfg);
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rp -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - rp).abs() < 1e-12);
        }
    }
}
