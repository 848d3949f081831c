//! Adaptive-moment gradient descent.

use std::collections::BTreeMap;

use crate::nn::Module;
use crate::{Float, GradStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<F: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor of `module` that has a gradient in `grads`.
    /// Returns the number of tensors updated.
    pub fn step(&mut self, module: &mut dyn Module<F>, grads: &GradStore<F>) -> usize {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let t = self.step as i32;
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let lr = F::c(c.lr);
        let eps = F::c(c.eps);
        let moments = &mut self.moments;
        let mut updated = 0;
        module.visit_mut("", &mut |name, p| {
            if !p.requires_grad() {
                return;
            }
            let Some(g) = grads.get(p) else { return };
            let n = p.numel();
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            let mut data = p.to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            *p = Tensor::param(p.shape().to_vec(), data);
            updated += 1;
        });
        updated
    }

    /// Flattened state for checkpointing: `step` plus `m.<name>` / `v.<name>` tensors.
    pub fn state(&self) -> (u64, Vec<(String, Tensor<F>)>) {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            out.push((
                format!("m.{name}"),
                Tensor::constant(vec![m.len()], m.clone()),
            ));
            out.push((
                format!("v.{name}"),
                Tensor::constant(vec![v.len()], v.clone()),
            ));
        }
        (self.step, out)
    }

    pub fn load_state(
        &mut self,
        step: u64,
        tensors: &BTreeMap<String, Tensor<F>>,
    ) -> Result<(), String> {
        let mut moments = BTreeMap::new();
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("m.") {
                let v = tensors
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| format!("optimizer state missing v.{name}"))?;
                moments.insert(name.to_string(), (t.to_vec(), v.to_vec()));
            } else if !key.starts_with("v.") {
                return Err(format!("unexpected optimizer tensor `{key}`"));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}
