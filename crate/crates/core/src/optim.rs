//! Momentum SGD with global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::numcore::Tensor;
use crate::params::GradMap;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Maximum global L2 norm of the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 3e-4,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Vec<f64>>) {
        self.velocity = velocity;
    }

    pub fn global_norm(grads: &GradMap) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplier applied to every gradient of this step.
    pub fn clip_scale(&self, grads: &GradMap) -> f64 {
        match self.config.clip_norm {
            Some(max) => {
                let n = Sgd::global_norm(grads);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        }
    }

    /// Updates one named parameter in place.
    pub fn apply(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, scale: f64) {
        assert_eq!(param.len(), grad.len(), "gradient shape for {name}");
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for ((p, vk), gk) in param
            .data_mut()
            .iter_mut()
            .zip(v.iter_mut())
            .zip(grad.data())
        {
            *vk = mu * *vk + scale * gk;
            *p -= lr * *vk;
        }
    }

    /// Convenience for trees visited with `for_each_mut`: updates every leaf
    /// that has an entry in `grads`.
    pub fn step_with(
        &mut self,
        grads: &GradMap,
        scale: f64,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    ) {
        visit(&mut |name, t| {
            if let Some(g) = grads.get(name) {
                self.apply(name, t, g, scale);
            }
        });
    }
}
