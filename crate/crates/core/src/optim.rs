//! Adam over the field's density and color parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VoxelField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr_density: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr_density: 0.05, lr_color: 0.05, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_density >= 0.0
            && self.lr_color >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m_density: Vec<f64>,
    v_density: Vec<f64>,
    m_color: Vec<f64>,
    v_color: Vec<f64>,
    steps: u32,
}

#[allow(clippy::too_many_arguments)]
fn update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c: &AdamConfig, bc1: f64, bc2: f64) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

impl Adam {
    pub fn new(field: &VoxelField, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let n = field.n_nodes();
        Ok(Self {
            config,
            m_density: vec![0.0; n],
            v_density: vec![0.0; n],
            m_color: vec![0.0; 3 * n],
            v_color: vec![0.0; 3 * n],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, field: &mut VoxelField) -> Result<()> {
        if field.n_nodes() != self.m_density.len() {
            return Err(Error::InvalidState("optimizer state does not match the field".into()));
        }
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        {
            let (density, color, grads) = field.params_and_grads_mut();
            update(density, &grads.density, &mut self.m_density, &mut self.v_density, c.lr_density, &c, bc1, bc2);
            update(color, &grads.color, &mut self.m_color, &mut self.v_color, c.lr_color, &c, bc1, bc2);
        }
        field.zero_grads();
        Ok(())
    }
}
