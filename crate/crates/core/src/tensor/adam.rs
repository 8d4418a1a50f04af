//! Adam with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Gradients must be populated; they
    /// are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam_step: {} params but state tracks {}",
                params.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(Error::invalid(format!("adam_step: param {i} has no gradient"))),
                Some(g) if g.len() != p.numel() => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        detail: format!("param {i}: grad len {} vs {}", g.len(), p.numel()),
                    })
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let scale = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().unwrap();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                data[j] -= scale * m[j] / (v[j].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}
