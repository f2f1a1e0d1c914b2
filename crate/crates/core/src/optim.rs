//! Adam over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one bias-corrected update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.shape(), grad.shape());
        let n = param.len();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// First and second moment buffers by parameter name.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.m.iter().map(|(k, m)| (k.as_str(), m.as_slice(), self.v[k].as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut a = Adam::new(0.1);
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        a.begin_step();
        a.update("p", &mut p, &Tensor::vector(vec![3.0, -0.2, 0.0]));
        let want = [0.9, -1.9, 0.5];
        for (x, w) in p.data().iter().zip(want) {
            assert!((x - w).abs() < 1e-6, "{x} vs {w}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = Adam::new(0.1);
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        for _ in 0..3 {
            a.begin_step();
            a.update("p", &mut p, &Tensor::zeros(&[2]));
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn two_steps_match_unrolled_reference() {
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8);
        let (g1, g2) = (0.5f64, -1.5f64);
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut a = Adam::new(lr);
        let mut p = Tensor::vector(vec![2.0]);
        a.begin_step();
        a.update("p", &mut p, &Tensor::vector(vec![g1]));
        assert!((p.data()[0] - x1).abs() < 1e-15);
        a.begin_step();
        a.update("p", &mut p, &Tensor::vector(vec![g2]));
        assert!((p.data()[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        let mut a = Adam::new(0.05);
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        for _ in 0..2000 {
            let g = Tensor::vector(p.data().iter().map(|x| 2.0 * x).collect());
            a.begin_step();
            a.update("p", &mut p, &g);
        }
        assert!(p.norm() < 1e-3);
    }
}
