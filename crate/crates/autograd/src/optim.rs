use std::collections::HashMap;

use crate::graph::Gradients;
use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

/// Adam with per-parameter step counters and bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
        }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Gradients) {
        for p in params {
            if let Some(g) = grads.of_param(p) {
                let g = g.clone();
                self.update(p, &g);
            }
        }
    }

    pub fn update(&mut self, p: &mut Param, grad: &Tensor) {
        let st = self.state.entry(p.id()).or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - self.beta1.powi(st.step as i32);
        let bc2 = 1.0 - self.beta2.powi(st.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let value = p.value_mut();
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.data_mut())
            .zip(st.v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Param::new(Tensor::new(&[2], vec![1.0, 1.0]));
        let mut adam = Adam::new(0.1);
        adam.update(&mut p, &Tensor::new(&[2], vec![3.0, -0.5]));
        let d = p.value().data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_fresh_param_unchanged() {
        let mut p = Param::new(Tensor::new(&[2], vec![0.3, -0.7]));
        let before = p.value().clone();
        Adam::new(1e-4).update(&mut p, &Tensor::zeros(&[2]));
        assert_eq!(p.value(), &before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new(Tensor::new(&[1], vec![5.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.value().map(|x| 2.0 * (x - 2.0));
            adam.update(&mut p, &g);
        }
        assert!((p.value().item() - 2.0).abs() < 1e-2);
    }
}
