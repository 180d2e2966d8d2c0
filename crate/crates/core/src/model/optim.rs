use serde::{Deserialize, Serialize};

use super::{Gradients, PolicyValueNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut PolicyValueNet, grads: &Gradients, lr: f64) {
        self.step_slice(net.params_mut(), &grads.data, lr);
    }

    /// Same update on a bare parameter slice.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state sized for a different parameter count");
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *p -= lr * weight_decay * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetShape, OutputGrad};

    #[test]
    fn step_reduces_cross_entropy() {
        let mut net = PolicyValueNet::new(NetShape::with_dims(6, 3, 4), 1);
        let mut opt = AdamW::new(net.params().len(), AdamWConfig::default());
        let loss = |net: &PolicyValueNet| -net.sequence_logprobs(&[1, 5], &[4]).unwrap()[0];
        let before = loss(&net);
        for _ in 0..20 {
            let tr = net.trace_actions(&[1, 5], &[4]).unwrap();
            let g = net.backward(&tr, &[OutputGrad::from_logp(&tr.logp[0], 4, -1.0, 0.0)]).unwrap();
            opt.step(&mut net, &g, 0.05);
        }
        assert!(loss(&net) < before);
    }

    #[test]
    fn clipping_bounds_norm() {
        let shape = NetShape::with_dims(6, 3, 4);
        let mut g = Gradients::zeros(shape);
        g.data.iter_mut().for_each(|x| *x = 1.0);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
