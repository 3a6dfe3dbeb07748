use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

/// Polynomial decay `base · (1 - iter/max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("poly_lr", "max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid(
            "poly_lr",
            alloc::format!("iteration {iter} is past max_iter {max_iter}"),
        ));
    }
    Ok(base * math::powf(1.0 - iter as f64 / max_iter as f64, power))
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + lr·(g + wd·w)`, `w ← w - v`.
///
/// Parameters must be passed in the same order on every step. Parameters
/// without a gradient are left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update and clears the consumed gradients.
    pub fn step(&mut self, params: Vec<&mut Tensor>, lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape("sgd", &[self.velocity.len()], &[params.len()]));
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let Some(g) = p.take_grad() else {
                continue;
            };
            if v.len() != g.len() {
                return Err(Error::shape("sgd", &[v.len()], &[g.len()]));
            }
            for ((w, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = self.momentum * *v + lr * (g + self.weight_decay * *w);
                *w -= *v;
            }
        }
        Ok(())
    }
}
