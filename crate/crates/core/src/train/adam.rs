//! Bias-corrected Adam.

use crate::network::Graph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One update at step `t` (1-based). Moments are updated in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    assert!(t >= 1, "adam step index starts at 1");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
    }
}

/// Moments for every trainable parameter of one graph, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(graph: &Graph) -> Self {
        let zeros: Vec<Tensor> = graph.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, graph: &mut Graph, grads: &[Tensor], cfg: &AdamConfig) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        for (i, p) in graph.params_mut().iter_mut().enumerate() {
            adam_step(
                p.tensor.data_mut(),
                grads[i].data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.t,
                cfg,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_step(&mut p, &[2.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert!((p[0] - 0.9998).abs() < 1e-11, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut p, mut m, mut v) = ([0.37], [0.0], [0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert_eq!(p[0], 0.37);
    }

    #[test]
    fn two_constant_steps() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 2, &cfg);
        // Hand-rolled: both bias-corrected moments equal 1 at each step.
        let mut expect = 0.0;
        let (mut mm, mut vv) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            mm = 0.5 * mm + 0.5;
            vv = 0.999 * vv + 0.001;
            let mh = mm / (1.0 - 0.5f64.powi(t));
            let vh = vv / (1.0 - 0.999f64.powi(t));
            expect -= 2e-4 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - expect).abs() < 1e-18);
        assert!((p[0] + 0.0004).abs() < 1e-11);
    }
}
