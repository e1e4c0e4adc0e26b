//! First-order optimizers over flat lists of parameter tensors.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Apply one update. `params` and `grads` must line up one-to-one and keep
    /// the same order between calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = momentum * *vi + gi;
                        *pi -= self.lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((pi, &gi), mi), vi) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
