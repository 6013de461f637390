//! First-order optimizers over lists of tensors.

use crate::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moment buffers shaped like `params`.
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. `lr == 0` leaves the parameters
    /// untouched bit for bit.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {k}");
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    *pi -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// `lr(t) = initial · decay^(t / every)`, with a continuous exponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpDecay {
    pub initial: f64,
    pub decay: f64,
    pub every: f64,
}

impl ExpDecay {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay: 1.0,
            every: 1.0,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        self.initial * self.decay.powf(step as f64 / self.every)
    }
}
