//! Adam with lazy updates on the feature grids: only entries that received a
//! gradient this step have their moments and values updated.

use super::{FieldGrads, RadianceField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m_mlp: Vec<f64>,
    v_mlp: Vec<f64>,
    m_grid: Vec<Vec<f64>>,
    v_grid: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, field: &RadianceField) -> Self {
        Self {
            config,
            step: 0,
            m_mlp: vec![0.0; field.mlp.len()],
            v_mlp: vec![0.0; field.mlp.len()],
            m_grid: field.grids.iter().map(|g| vec![0.0; g.data.len()]).collect(),
            v_grid: field.grids.iter().map(|g| vec![0.0; g.data.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and clears `grads`.
    pub fn step(&mut self, field: &mut RadianceField, grads: &mut FieldGrads, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            p.is_finite()
        };
        let mut finite = true;
        for i in 0..field.mlp.len() {
            finite &= update(&mut field.mlp[i], grads.mlp[i], &mut self.m_mlp[i], &mut self.v_mlp[i]);
        }
        let f = field.config.encoding.features_per_level;
        for (l, touched) in grads.touched.iter().enumerate() {
            let (data, g) = (&mut field.grids[l].data, &grads.grids[l]);
            let (m, v) = (&mut self.m_grid[l], &mut self.v_grid[l]);
            for &vtx in touched {
                let base = vtx as usize * f;
                for i in base..base + f {
                    finite &= update(&mut data[i], g[i], &mut m[i], &mut v[i]);
                }
            }
        }
        grads.clear();
        if finite {
            Ok(())
        } else {
            Err(Error::Degenerate("optimizer produced a non-finite parameter".into()))
        }
    }
}
