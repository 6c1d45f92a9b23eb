//! Adam over named tensors.

use std::collections::BTreeMap;

use vip_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Moments are kept per tensor name, each with its own step count, so a
/// tensor that skips a step (for example one that received no gradient)
/// is bias-corrected by its own history.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let c = self.cfg;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        for (((w, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut w = Tensor::vector(vec![1.0, -1.0]);
        opt.step("w", &mut w, &Tensor::vector(vec![3.0, -0.5])).unwrap();
        assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut w = Tensor::vector(vec![2.0]);
        for _ in 0..500 {
            let g = w.map(|x| 2.0 * (x - 0.5));
            opt.step("w", &mut w, &g).unwrap();
        }
        assert!((w.data()[0] - 0.5).abs() < 1e-2);
    }
}
