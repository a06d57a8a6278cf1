//! First-order optimizers over a [`ParamSet`].
//!
//! Every optimizer here *ascends*: callers pass the gradient of the objective
//! they want to increase. Losses are handled by negating the gradient, see
//! [`Optimizer::descend`].

use diffcore::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Parameters the optimizer must never touch (e.g. padding embeddings).
    frozen_rows: Vec<(usize, usize)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            frozen_rows: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    /// Keeps row `row` of parameter `param` (a rank-2 tensor) fixed.
    pub fn freeze_row(mut self, param: usize, row: usize) -> Self {
        self.frozen_rows.push((param, row));
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the step size; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One step in the direction of `grads`.
    pub fn ascend(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        self.apply(params, grads, 1.0)
    }

    /// One step against `grads`.
    pub fn descend(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        self.apply(params, grads, -1.0)
    }

    fn apply(&mut self, params: &mut ParamSet, grads: &[Tensor], sign: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(crate::error::Error::NonFinite("gradient".into()));
        }
        let masked = self.masked(params, grads);
        let grads = masked.as_deref().unwrap_or(grads);
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
                    let p = params.get_mut(id).data_mut();
                    for (x, gi) in p.iter_mut().zip(g.data()) {
                        *x += sign * self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (id, g)) in params.ids().collect::<Vec<_>>().into_iter().zip(grads).enumerate() {
                    let p = params.get_mut(id).data_mut();
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..p.len() {
                        let gk = sign * g.data()[k];
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        p[k] += self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn masked(&self, params: &ParamSet, grads: &[Tensor]) -> Option<Vec<Tensor>> {
        if self.frozen_rows.is_empty() {
            return None;
        }
        let mut out = grads.to_vec();
        for &(param, row) in &self.frozen_rows {
            let cols = params.get(diffcore::ParamId(param)).dims2().map(|d| d.1).unwrap_or(0);
            for x in &mut out[param].data_mut()[row * cols..(row + 1) * cols] {
                *x = 0.0;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(v)).unwrap();
        p
    }

    #[test]
    fn sgd_moves_along_gradient() {
        let mut p = one_param(&[1.0, 2.0]);
        let mut opt = Optimizer::sgd(0.5);
        opt.ascend(&mut p, &[Tensor::row(&[2.0, -2.0])]).unwrap();
        assert_eq!(p.flatten(), vec![2.0, 1.0]);
        opt.descend(&mut p, &[Tensor::row(&[2.0, -2.0])]).unwrap();
        assert_eq!(p.flatten(), vec![1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        let mut p = one_param(&[0.0, 0.0]);
        let mut opt = Optimizer::adam(0.1);
        opt.ascend(&mut p, &[Tensor::row(&[5.0, -0.01])]).unwrap();
        let f = p.flatten();
        assert!((f[0] - 0.1).abs() < 1e-6);
        assert!((f[1] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = one_param(&[0.3, -0.7]);
        let before = p.clone();
        let mut opt = Optimizer::adam(0.0);
        opt.ascend(&mut p, &[Tensor::row(&[1.0, 1.0])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_rows_stay_put() {
        let mut p = ParamSet::new();
        p.insert("e", Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        let mut opt = Optimizer::sgd(1.0).freeze_row(0, 0);
        opt.ascend(&mut p, &[Tensor::full(&[2, 2], 1.0)]).unwrap();
        assert_eq!(p.flatten(), vec![0.0, 0.0, 2.0, 2.0]);
    }
}
