//! Optimizers over the flat parameter vector.

use super::param::{GradBuf, ParamStore};

/// Plain SGD. Kept free of auxiliary state so a privatized gradient step
/// and an ordinary one are the same arithmetic.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Self { lr }
    }

    pub fn step(&self, ps: &mut ParamStore, g: &GradBuf) {
        for (p, gv) in ps.flat_mut().iter_mut().zip(g.flat().iter()) {
            *p -= self.lr * gv;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, ps: &mut ParamStore, g: &GradBuf) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, gv), m), v) in ps
            .flat_mut()
            .iter_mut()
            .zip(g.flat().iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
