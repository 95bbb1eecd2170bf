use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[(usize, usize)]) -> Self {
        let zeros = |s: &(usize, usize)| Tensor2::zeros(s.0, s.1);
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (shapes.iter().map(zeros).collect(), shapes.iter().map(zeros).collect()),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn for_params(kind: OptimizerKind, lr: f64, params: &[&Tensor2]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        Self::new(kind, lr, &shapes)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::State(format!("Adam state has {} slots for {} params", self.m.len(), params.len())));
                }
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor2::row_vector(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &[(1, 2)]);
        opt.step(&mut [&mut p], &[Tensor2::row_vector(&[2.0, -2.0])]).unwrap();
        assert_eq!(p.data(), &[0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor2::row_vector(&[1.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &[(1, 2)]);
        opt.step(&mut [&mut p], &[Tensor2::row_vector(&[3.0, -0.5])]).unwrap();
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_exact_noop() {
        let orig = Tensor2::row_vector(&[0.3, -7.25]);
        let mut p = orig.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &[(1, 2)]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Tensor2::row_vector(&[1.0, 1e-3])]).unwrap();
        }
        assert_eq!(p, orig);
    }
}
