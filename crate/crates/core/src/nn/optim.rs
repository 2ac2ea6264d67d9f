use serde::{Deserialize, Serialize};

use super::{Module, Param};
use crate::scalar::Scalar;

/// Adaptive-moment optimizer with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers for one module, in parameter visiting order.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr` and clear the gradients.
    pub fn step<M: Module<T> + ?Sized>(&mut self, cfg: &Adam, module: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one, wd, eps) = (T::one(), T::of(cfg.weight_decay), T::of(cfg.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for i in 0..p.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        p: Param<f64>,
    }

    impl Module<f64> for Quadratic {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
            f(&self.p);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr * sign(g).
        let mut q = Quadratic {
            p: Param { value: vec![1.0, -2.0], grad: vec![0.5, -3.0] },
        };
        let mut st = AdamState::new();
        st.step(&Adam::new(0.9, 0.999, 0.0), &mut q, 0.1);
        assert!((q.p.value[0] - 0.9).abs() < 1e-6);
        assert!((q.p.value[1] + 1.9).abs() < 1e-6);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic { p: Param::zeros(3) };
        q.p.value = vec![3.0, -1.0, 0.5];
        let mut st = AdamState::new();
        let cfg = Adam::new(0.9, 0.999, 0.0);
        for _ in 0..2000 {
            for i in 0..3 {
                q.p.grad[i] = 2.0 * (q.p.value[i] - 1.0);
            }
            st.step(&cfg, &mut q, 0.01);
        }
        assert!(q.p.value.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
