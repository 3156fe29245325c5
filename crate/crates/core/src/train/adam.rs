use crate::splat::{Gaussian, PARAMS};

#[derive(Debug, Clone)]
pub struct Adam {
    /// Learning rate per parameter slot.
    pub lr: [f64; PARAMS],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<[f64; PARAMS]>,
    v: Vec<[f64; PARAMS]>,
    step: u64,
}

impl Adam {
    pub fn new(count: usize, lr: [f64; PARAMS]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![[0.0; PARAMS]; count],
            v: vec![[0.0; PARAMS]; count],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[[f64; PARAMS]], &[[f64; PARAMS]]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update, then the representation invariants are restored.
    pub fn update(&mut self, gaussians: &mut [Gaussian], grads: &[[f64; PARAMS]]) {
        assert_eq!(
            gaussians.len(),
            self.m.len(),
            "moment tensors must match the scene"
        );
        assert_eq!(grads.len(), self.m.len(), "one gradient per Gaussian");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((g, grad), (m, v)) in gaussians
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut p = g.to_params();
            for i in 0..PARAMS {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr[i] * mh / (vh.sqrt() + self.eps);
            }
            *g = Gaussian::from_params(&p);
            g.sanitize();
        }
    }
}
